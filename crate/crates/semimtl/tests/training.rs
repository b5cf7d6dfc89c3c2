mod common;

use std::fs;
use std::path::Path;

use common::{bits, tiny};
use semimtl::checkpoint;
use semimtl::nets::ParamGroup;
use semimtl::trainer::{resume, train, LogEntry, Phase, TrainLog, Trainer, TrainerMode};
use synscene::Task;
use tensorcore::Tensor;

fn gen_values(t: &Trainer) -> Vec<Tensor> {
    t.generator().store().params().iter().map(|p| p.value.clone()).collect()
}

fn disc_values(t: &Trainer) -> Vec<Tensor> {
    t.discriminators().values().flat_map(|d| d.store().params().iter().map(|p| p.value.clone())).collect()
}

#[test]
fn phases_freeze_the_other_side() {
    let mut t = Trainer::new(tiny(TrainerMode::SemiMtlM3, 1)).unwrap();
    for _ in 0..3 {
        t.begin_iteration().unwrap();
        let d_before = bits(&disc_values(&t));
        let g_before = bits(&gen_values(&t));
        for _ in 0..2 {
            t.generator_step().unwrap();
        }
        assert_eq!(bits(&disc_values(&t)), d_before);
        assert_ne!(bits(&gen_values(&t)), g_before);
        let g_mid = bits(&gen_values(&t));
        t.discriminator_step().unwrap();
        assert_eq!(bits(&gen_values(&t)), g_mid);
        assert_ne!(bits(&disc_values(&t)), d_before);
        assert!(t.generator().store().params().iter().all(|p| p.value.grad().is_none()));
    }
    t.enter_phase(Phase::Discriminator).unwrap();
    let mask = t.mask();
    assert!(!mask[&ParamGroup::Shared] && !mask[&ParamGroup::SegDecoder] && mask[&ParamGroup::SegDiscriminator]);
}

#[test]
fn zero_adversarial_weights_reduce_to_joint_training() {
    let mut semi = tiny(TrainerMode::SemiMtlM2, 2);
    semi.weights.lambda_intra = 0.0;
    semi.weights.lambda_inter = 0.0;
    semi.iterations = 6;
    let mut jtl = tiny(TrainerMode::Jtl, 2);
    jtl.iterations = 6;
    let (_, a) = train(semi).unwrap();
    let (_, b) = train(jtl).unwrap();
    let (la, lb) = (a.generator_losses(), b.generator_losses());
    assert_eq!(la.len(), 12);
    for (x, y) in la.iter().zip(&lb) {
        assert!((x.unwrap() - y.unwrap()).abs() <= 1e-12, "{x:?} vs {y:?}");
    }
}

#[test]
fn single_task_modes_step_only_on_labeled_batches() {
    let (_, log) = train(tiny(TrainerMode::StlDepth, 3)).unwrap();
    for r in log.iterations() {
        assert_eq!(r.steps[0].loss_g, None);
        assert!(r.steps[1].loss_g.is_some());
        assert_eq!(r.steps[1].tasks.keys().copied().collect::<Vec<_>>(), [Task::Depth]);
    }
}

#[test]
fn identical_configs_reproduce_logs_bitwise() {
    let (ta, a) = train(tiny(TrainerMode::SemiSd, 4)).unwrap();
    let (tb, b) = train(tiny(TrainerMode::SemiSd, 4)).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    assert_eq!(bits(&gen_values(&ta)), bits(&gen_values(&tb)));
    let (_, c) = train(tiny(TrainerMode::SemiSd, 5)).unwrap();
    assert_ne!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
}

#[test]
fn log_round_trips_through_jsonl() {
    let mut cfg = tiny(TrainerMode::SemiMtlM1, 6);
    cfg.eval_interval = 2;
    cfg.diagnostics = true;
    let (_, log) = train(cfg).unwrap();
    assert_eq!(log.entries.iter().filter(|e| matches!(e, LogEntry::Eval(_))).count(), 2);
    assert!(log.iterations().all(|r| r.steps.iter().all(|s| s.shared_grad_sq.is_some())));
    let text = log.to_jsonl().unwrap();
    assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny(TrainerMode::SemiMtlM2, 7)).unwrap();
    for _ in 0..2 {
        t.train_iteration().unwrap();
    }
    checkpoint::save(&t, &tmp.path().join("a")).unwrap();
    let loaded = checkpoint::load(&tmp.path().join("a")).unwrap();
    checkpoint::save(&loaded, &tmp.path().join("b")).unwrap();
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    assert_eq!(loaded.iteration(), 2);
}

#[test]
fn tampered_checkpoint_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny(TrainerMode::Jtl, 8)).unwrap();
    let dir = tmp.path().join("ck");
    checkpoint::save(&t, &dir).unwrap();
    let m = fs::read_to_string(dir.join("manifest.json")).unwrap();
    fs::write(dir.join("manifest.json"), m.replacen("\"batch_size\": 2", "\"batch_size\": 3", 1)).unwrap();
    assert!(checkpoint::load(&dir).is_err());
}

#[test]
fn resume_matches_uninterrupted_training() {
    for mode in [TrainerMode::SemiMtlM2, TrainerMode::Jtl] {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(mode, 9);
        cfg.iterations = 6;
        let (full, full_log) = train(cfg.clone()).unwrap();

        cfg.output_dir = Some(tmp.path().to_path_buf());
        cfg.eval_interval = 3;
        let mut first = Trainer::new(cfg).unwrap();
        for _ in 0..3 {
            first.train_iteration().unwrap();
        }
        checkpoint::save_atomic(&first, &tmp.path().join("checkpoint")).unwrap();
        drop(first);
        let (resumed, resumed_log) = resume(&tmp.path().join("checkpoint")).unwrap();
        assert_eq!(bits(&gen_values(&resumed)), bits(&gen_values(&full)));
        assert_eq!(bits(&disc_values(&resumed)), bits(&disc_values(&full)));
        let tail: Vec<_> = full_log.iterations().skip(3).cloned().collect();
        let got: Vec<_> = resumed_log.iterations().cloned().collect();
        assert_eq!(got, tail);
    }
}
