fn main() {
    std::process::exit(semimtl_cli::cli_main(std::env::args_os()));
}
