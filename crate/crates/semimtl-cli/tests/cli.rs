use std::fs;
use std::path::Path;

use semimtl::experiment::{ExperimentConfig, EXPERIMENT_SCHEMA_VERSION};
use semimtl::nets::GeneratorConfig;
use semimtl::report::{csv_header, from_json};
use semimtl::trainer::{TrainConfig, TrainerMode};
use semimtl_cli::{cli_main, EvalReport, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use synscene::Task;

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("semimtl").chain(args.iter().copied()))
}

fn tiny(mode: TrainerMode) -> TrainConfig {
    let mut cfg = TrainConfig::desk(mode, 3);
    for d in &mut cfg.datasets {
        d.size = 8;
        d.test_size = 4;
    }
    cfg.iterations = 3;
    cfg.batch_size = 2;
    cfg.generator = GeneratorConfig { encoder_channels: vec![4, 4, 4], decoder_channels: 4, ..Default::default() };
    cfg.discriminator.channels = vec![2, 2, 2, 2];
    cfg
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["bogus"]), EXIT_USAGE);
    assert_eq!(run(&["report", "t.json", "--format", "xml"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn runtime_errors_exit_two() {
    assert_eq!(run(&["--quiet", "train", "/nonexistent/config.json"]), EXIT_FAILURE);
    assert_eq!(run(&["--quiet", "gradcheck", "--op", "no_such_op"]), EXIT_FAILURE);
}

#[test]
fn gradcheck_single_case_passes() {
    assert_eq!(run(&["--quiet", "gradcheck", "--op", "conv2d"]), EXIT_OK);
    assert_eq!(run(&["--quiet", "gradcheck", "--op", "berhu_loss"]), EXIT_OK);
}

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = tiny(TrainerMode::StlSeg);

    let spec_path = root.join("spec.json");
    write_json(&spec_path, &cfg.datasets[0]);
    let data = root.join("data");
    assert_eq!(run(&["--quiet", "gen-data", p(&spec_path), p(&data)]), EXIT_OK);

    let cfg_path = root.join("train.json");
    write_json(&cfg_path, &cfg);
    let out = root.join("run");
    assert_eq!(run(&["--quiet", "train", p(&cfg_path), "--out", p(&out)]), EXIT_OK);
    let ckpt = out.join("checkpoint");
    assert!(ckpt.exists());

    // resuming a finished run is a no-op that still succeeds
    assert_eq!(run(&["--quiet", "train", p(&cfg_path), "--out", p(&out), "--resume"]), EXIT_OK);

    let report_path = root.join("eval.json");
    assert_eq!(run(&["--quiet", "eval", p(&ckpt), p(&data), "--out", p(&report_path)]), EXIT_OK);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.checkpoint_mode, TrainerMode::StlSeg);
    assert_eq!(report.iteration, 3);
    assert_eq!(report.samples, 4);
    assert!(report.seg.is_some() && report.depth.is_some());
    assert_eq!(report.untrained, vec![Task::Depth]);

    assert_eq!(run(&["--quiet", "eval", p(&ckpt), p(&data), "--out", p(&report_path), "--tasks", "seg"]), EXIT_OK);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.seg.is_some() && report.depth.is_none());
    assert!(report.untrained.is_empty());
}

#[test]
fn resume_rejects_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(TrainerMode::Jtl);
    let cfg_path = tmp.path().join("train.json");
    write_json(&cfg_path, &cfg);
    let out = tmp.path().join("run");
    assert_eq!(run(&["--quiet", "train", p(&cfg_path), "--out", p(&out)]), EXIT_OK);
    let mut changed = cfg.clone();
    changed.weights.w_depth = 0.5;
    write_json(&cfg_path, &changed);
    assert_eq!(run(&["--quiet", "train", p(&cfg_path), "--out", p(&out), "--resume"]), EXIT_FAILURE);
}

#[test]
fn experiment_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        schema_version: EXPERIMENT_SCHEMA_VERSION,
        base: tiny(TrainerMode::Jtl),
        modes: vec![TrainerMode::StlSeg, TrainerMode::StlDepth, TrainerMode::Jtl],
        seeds: vec![0, 1],
        output_dir: None,
    };
    let cfg_path = tmp.path().join("exp.json");
    write_json(&cfg_path, &cfg);
    let out = tmp.path().join("exp");
    assert_eq!(run(&["--quiet", "experiment", p(&cfg_path), "--out", p(&out)]), EXIT_OK);

    let table = from_json(&fs::read_to_string(out.join("table.json")).unwrap()).unwrap();
    assert_eq!(table.methods(), vec!["STL", "JTL"]);

    let csv_path = tmp.path().join("again.csv");
    assert_eq!(run(&["report", p(&out.join("table.json")), "--format", "csv", "--out", p(&csv_path)]), EXIT_OK);
    let text = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text, fs::read_to_string(out.join("table.csv")).unwrap());

    let mut rows = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rows.headers().unwrap().iter().collect::<Vec<_>>(), csv_header());
    let mut seen = 0;
    for rec in rows.records() {
        let rec = rec.unwrap();
        let row = table.row(&rec[0], &rec[1]).unwrap();
        let mean = row.mean.unwrap();
        assert_eq!(rec[4].parse::<f64>().unwrap(), mean.pacc);
        assert_eq!(rec[6].parse::<f64>().unwrap(), mean.miou);
        assert_eq!(rec[10].parse::<f64>().unwrap(), mean.rmse);
        seen += 1;
    }
    assert_eq!(seen, table.rows.len());

    let json_path = tmp.path().join("again.json");
    assert_eq!(run(&["report", p(&out.join("table.json")), "--format", "json", "--out", p(&json_path)]), EXIT_OK);
    assert_eq!(from_json(&fs::read_to_string(&json_path).unwrap()).unwrap(), table);
}
