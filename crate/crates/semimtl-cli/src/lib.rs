//! `semimtl` command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use synscene::store::{load_split, write_dataset_dir, Split};
use synscene::{DatasetSpec, Task};

use semimtl::experiment::{run_experiment_with, ExperimentConfig, ExperimentTable, STL_METHOD};
use semimtl::metrics::{evaluate, DepthMetrics, SegMetrics};
use semimtl::report::{emit_report, format_delta_m, from_json, render, ReportFormat};
use semimtl::trainer::{LogEntry, TrainConfig, TrainLog, Trainer, TrainerMode};
use semimtl::{checkpoint, gradsuite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const EVAL_REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "semimtl", version, about = "Semi-supervised multi-task learning on synthetic domains")]
struct Cli {
    /// Overrides the seed of the dataset spec, run, or experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a dataset spec's train and test splits to a directory.
    GenData { spec: PathBuf, out_dir: PathBuf },
    /// Train one mode.
    Train {
        config: PathBuf,
        /// Output directory for the log and checkpoint; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a generated dataset's test split.
    Eval {
        checkpoint: PathBuf,
        dataset_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tasks to report.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [TaskArg::Seg, TaskArg::Depth])]
        tasks: Vec<TaskArg>,
    },
    /// Train every mode for every seed and write table.json and table.csv.
    Experiment {
        config: PathBuf,
        /// Directory for the tables and per-run outputs; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Run a single named case.
        #[arg(long)]
        op: Option<String>,
        /// List case names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Re-emit an experiment table.
    Report {
        table: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Seg,
    Depth,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Seg => Task::Seg,
            TaskArg::Depth => Task::Depth,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

/// Output of `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint_mode: TrainerMode,
    pub iteration: u64,
    pub dataset: String,
    pub samples: usize,
    pub seg: Option<SegMetrics>,
    pub depth: Option<DepthMetrics>,
    /// Requested tasks whose head the checkpoint never trained.
    pub untrained: Vec<Task>,
}

type CliResult<T> = Result<T, String>;

struct Ctx {
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn info(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| format!("writing {}: {e}", path.display()))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet };
    let outcome = match cli.command {
        Command::GenData { spec, out_dir } => gen_data(&ctx, &spec, &out_dir),
        Command::Train { config, out, resume } => train_cmd(&ctx, &config, out, resume),
        Command::Eval { checkpoint, dataset_dir, out, tasks } => {
            let tasks: Vec<Task> = tasks.into_iter().map(Task::from).collect();
            eval_cmd(&ctx, &checkpoint, &dataset_dir, &out, &tasks)
        }
        Command::Experiment { config, out } => experiment_cmd(&ctx, &config, out),
        Command::Gradcheck { op, list } => gradcheck_cmd(&ctx, op.as_deref(), list),
        Command::Report { table, format, out } => report_cmd(&table, format.into(), out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn gen_data(ctx: &Ctx, spec_path: &Path, out_dir: &Path) -> CliResult<i32> {
    let mut spec: DatasetSpec = read_json(spec_path)?;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let m = write_dataset_dir(&spec, out_dir).map_err(err)?;
    for s in &m.splits {
        ctx.info(&format!("{:?}: {} samples", s.split, s.samples.len()));
    }
    ctx.info(&format!("wrote {}", out_dir.display()));
    Ok(EXIT_OK)
}

fn summarize_eval(ctx: &Ctx, entry: &LogEntry) {
    if let LogEntry::Eval(e) = entry {
        for d in &e.datasets {
            ctx.info(&format!(
                "iter {:>6} {:<8} mIoU {:.4} pAcc {:.4} | RMSE {:.4} AbR {:.4} d1 {:.4}",
                e.iteration, d.dataset, d.seg.miou, d.seg.pacc, d.depth.rmse, d.depth.abr, d.depth.delta1
            ));
        }
    }
}

fn train_cmd(ctx: &Ctx, config: &Path, out: Option<PathBuf>, resume: bool) -> CliResult<i32> {
    let mut cfg: TrainConfig = read_json(config)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let dir = cfg.output_dir.clone().ok_or("no output directory: set output_dir in the config or pass --out")?;
    let mut trainer = if resume {
        let t = checkpoint::load(&dir.join("checkpoint")).map_err(err)?;
        if checkpoint::config_hash(t.config()).map_err(err)? != checkpoint::config_hash(&cfg).map_err(err)? {
            return Err("checkpoint was written by a different config".into());
        }
        ctx.info(&format!("resuming {} at iteration {}", t.config().mode, t.iteration()));
        t
    } else {
        Trainer::new(cfg).map_err(err)?
    };
    let mut log = TrainLog::default();
    trainer.run(&mut log).map_err(err)?;
    for e in &log.entries {
        summarize_eval(ctx, e);
    }
    let last = log.iterations().last().and_then(|r| r.steps.iter().rev().find_map(|s| s.loss_g));
    ctx.info(&format!(
        "{} finished {} iterations; last generator loss {}",
        trainer.config().mode,
        trainer.iteration(),
        last.map_or("n/a".to_string(), |l| format!("{l:.6}"))
    ));
    ctx.info(&format!("checkpoint: {}", dir.join("checkpoint").display()));
    Ok(EXIT_OK)
}

fn eval_cmd(ctx: &Ctx, ckpt: &Path, dataset_dir: &Path, out: &Path, tasks: &[Task]) -> CliResult<i32> {
    let trainer = checkpoint::load(ckpt).map_err(err)?;
    let mode = trainer.config().mode;
    let trained = mode.tasks();
    let untrained: Vec<Task> = tasks.iter().copied().filter(|t| !trained.contains(t)).collect();
    for t in &untrained {
        eprintln!(
            "warning: task head untrained: {t} (checkpoint trained as {mode}); its numbers reflect random weights"
        );
    }
    let test = load_split(dataset_dir, Split::Test).map_err(err)?;
    let m = evaluate(trainer.generator(), &test).map_err(err)?;
    let report = EvalReport {
        schema_version: EVAL_REPORT_SCHEMA_VERSION,
        checkpoint_mode: mode,
        iteration: trainer.iteration(),
        dataset: m.dataset.clone(),
        samples: m.samples,
        seg: tasks.contains(&Task::Seg).then_some(m.seg),
        depth: tasks.contains(&Task::Depth).then_some(m.depth),
        untrained,
    };
    if let Some(s) = &report.seg {
        ctx.info(&format!("seg:   pAcc {:.4} mIoU {:.4}", s.pacc, s.miou));
    }
    if let Some(d) = &report.depth {
        ctx.info(&format!(
            "depth: AbR {:.4} RMSE {:.4} d1 {:.4} d2 {:.4} d3 {:.4} (valid {:.3})",
            d.abr, d.rmse, d.delta1, d.delta2, d.delta3, d.valid_fraction
        ));
    }
    let json = serde_json::to_string_pretty(&report).map_err(err)?;
    write_file(out, &(json + "\n"))?;
    ctx.info(&format!("wrote {}", out.display()));
    Ok(EXIT_OK)
}

fn print_table(ctx: &Ctx, table: &ExperimentTable) {
    ctx.info(&format!("{:<12} {:<8} {:>8} {:>8} {:>7}  status", "method", "dataset", "mIoU", "RMSE", "ΔM"));
    for r in &table.rows {
        let (miou, rmse, dm) = match r.mean {
            Some(m) => {
                (format!("{:.4}", m.miou), format!("{:.4}", m.rmse), m.delta_m.map_or("-".to_string(), format_delta_m))
            }
            None => ("-".into(), "-".into(), "-".into()),
        };
        ctx.info(&format!("{:<12} {:<8} {miou:>8} {rmse:>8} {dm:>7}  {}", r.method, r.dataset, r.status.name()));
    }
}

fn experiment_cmd(ctx: &Ctx, config: &Path, out: Option<PathBuf>) -> CliResult<i32> {
    let mut cfg: ExperimentConfig = read_json(config)?;
    if let Some(s) = ctx.seed {
        cfg.seeds = vec![s];
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;
    let table = run_experiment_with(&cfg, &mut |msg| ctx.info(msg)).map_err(err)?;
    for format in [ReportFormat::Json, ReportFormat::Csv] {
        let path = dir.join(format!("table.{}", format.extension()));
        emit_report(&table, format, &path).map_err(err)?;
        ctx.info(&format!("wrote {}", path.display()));
    }
    print_table(ctx, &table);
    if !table.methods().contains(&STL_METHOD) {
        ctx.info("no STL baseline (needs both STL_seg and STL_depth); ΔM omitted");
    }
    let failed = table.rows.iter().flat_map(|r| &r.runs).filter(|s| s.failure.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} table cells come from failed runs");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

fn gradcheck_cmd(ctx: &Ctx, op: Option<&str>, list: bool) -> CliResult<i32> {
    if list {
        for n in gradsuite::case_names() {
            println!("{n}");
        }
        return Ok(EXIT_OK);
    }
    let seed = ctx.seed.unwrap_or(0);
    let results = match op {
        Some(name) => vec![gradsuite::run_case(name, seed).map_err(err)?],
        None => gradsuite::run_suite(seed).map_err(err)?,
    };
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        ctx.info(&format!(
            "{verdict} {:<28} max rel err {:.3e} (< {:.0e}, {} points)",
            r.name, r.max_error, r.tolerance, r.points
        ));
    }
    ctx.info(&format!("{} of {} cases passed", results.len() - failed, results.len()));
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn report_cmd(table: &Path, format: ReportFormat, out: Option<&Path>) -> CliResult<i32> {
    let text = fs::read_to_string(table).map_err(|e| format!("reading {}: {e}", table.display()))?;
    let table = from_json(&text).map_err(err)?;
    let rendered = render(&table, format).map_err(err)?;
    match out {
        Some(p) => write_file(p, &rendered)?,
        None => print!("{rendered}"),
    }
    Ok(EXIT_OK)
}
