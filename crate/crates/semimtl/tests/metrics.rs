use std::collections::BTreeMap;

use proptest::prelude::*;
use semimtl::metrics::{delta_m, depth_metrics, representative_directions, seg_metrics};
use synscene::Task;

/// Brute-force mIoU: per class, count TP/FP/FN with direct pixel loops.
fn seg_oracle(pred: &[usize], gt: &[usize], classes: usize) -> (f64, f64) {
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    let mut ious = Vec::new();
    for k in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == k, g == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            ious.push(tp as f64 / (tp + fp + fn_) as f64);
        }
    }
    (correct as f64 / gt.len() as f64, ious.iter().sum::<f64>() / ious.len() as f64)
}

fn depth_oracle(pred: &[f64], gt: &[f64]) -> [f64; 5] {
    let pairs: Vec<(f64, f64)> = pred.iter().zip(gt).filter(|(_, &g)| g > 0.0).map(|(&p, &g)| (p, g)).collect();
    let n = pairs.len() as f64;
    let abr = pairs.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
    let rmse = (pairs.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
    let within = |t: f64| pairs.iter().filter(|(p, g)| *p > 0.0 && (p / g).max(g / p) < t).count() as f64 / n;
    [abr, rmse, within(1.25), within(1.25 * 1.25), within(1.25 * 1.25 * 1.25)]
}

fn map(seg: f64, rmse: f64) -> BTreeMap<Task, f64> {
    BTreeMap::from([(Task::Seg, seg), (Task::Depth, rmse)])
}

#[test]
fn hand_examples() {
    let m = seg_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(m.pacc, 0.75);
    assert!((m.miou - 0.583_333_333_333_333_4).abs() < 1e-15);
    let m = depth_metrics(&[2.0, 2.0], &[1.0, 2.0]).unwrap();
    assert_eq!((m.abr, m.delta1, m.delta2, m.delta3), (0.5, 0.5, 0.5, 0.5));
    assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-15);
    let m = depth_metrics(&[0.4, 0.7], &[0.4, 0.7]).unwrap();
    assert_eq!((m.abr, m.rmse, m.delta1, m.delta3), (0.0, 0.0, 1.0, 1.0));
}

#[test]
fn reference_delta_m_values() {
    let d = representative_directions();
    let cases = [
        (map(71.4, 5.469), map(71.4, 6.744), 9.4),
        (map(71.9, 5.234), map(71.4, 6.744), 11.5),
        (map(75.5, 8.646), map(76.0, 14.36), 19.6),
    ];
    for (model, base, expect) in cases {
        let v = delta_m(&model, &base, &d).unwrap();
        assert!((v - expect).abs() <= 0.1, "{v} vs {expect}");
    }
}

#[test]
fn shape_mismatch_and_empty_depth_are_errors() {
    assert!(seg_metrics(&[0, 1], &[0], 2).is_err());
    assert!(depth_metrics(&[1.0], &[1.0, 2.0]).is_err());
    assert!(depth_metrics(&[1.0, 2.0], &[0.0, 0.0]).is_err());
}

proptest! {
    #[test]
    fn seg_matches_oracle(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..64)) {
        let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = seg_metrics(&pred, &gt, 4).unwrap();
        let (pacc, miou) = seg_oracle(&pred, &gt, 4);
        prop_assert!((m.pacc - pacc).abs() <= 1e-12);
        prop_assert!((m.miou - miou).abs() <= 1e-12);
    }

    #[test]
    fn depth_matches_oracle(pairs in proptest::collection::vec((0.0f64..2.0, prop_oneof![Just(0.0), 0.01f64..2.0]), 1..64)) {
        let (pred, gt): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(gt.iter().any(|&g| g > 0.0));
        let m = depth_metrics(&pred, &gt).unwrap();
        let o = depth_oracle(&pred, &gt);
        for (a, b) in [m.abr, m.rmse, m.delta1, m.delta2, m.delta3].iter().zip(o) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
    }

    #[test]
    fn metrics_are_permutation_invariant(pairs in proptest::collection::vec((0usize..3, 0usize..3, 0.01f64..1.0, 0.01f64..1.0), 2..40), rot in 1usize..40) {
        let mut shifted = pairs.clone();
        let k = rot % shifted.len();
        shifted.rotate_left(k);
        shifted.reverse();
        let split = |v: &[(usize, usize, f64, f64)]| {
            (v.iter().map(|x| x.0).collect::<Vec<_>>(), v.iter().map(|x| x.1).collect::<Vec<_>>(),
             v.iter().map(|x| x.2).collect::<Vec<_>>(), v.iter().map(|x| x.3).collect::<Vec<_>>())
        };
        let (p, g, dp, dg) = split(&pairs);
        let (p2, g2, dp2, dg2) = split(&shifted);
        let (a, b) = (seg_metrics(&p, &g, 3).unwrap(), seg_metrics(&p2, &g2, 3).unwrap());
        prop_assert_eq!(a.pacc, b.pacc);
        prop_assert!((a.miou - b.miou).abs() <= 1e-15);
        let (a, b) = (depth_metrics(&dp, &dg).unwrap(), depth_metrics(&dp2, &dg2).unwrap());
        prop_assert!((a.abr - b.abr).abs() <= 1e-12 && (a.rmse - b.rmse).abs() <= 1e-12);
        prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
    }

    #[test]
    fn ratio_metrics_are_scale_invariant(pairs in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..32), s in 0.5f64..4.0) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = depth_metrics(&p, &g).unwrap();
        let ps: Vec<f64> = p.iter().map(|x| x * s).collect();
        let gs: Vec<f64> = g.iter().map(|x| x * s).collect();
        let b = depth_metrics(&ps, &gs).unwrap();
        prop_assert!((a.abr - b.abr).abs() <= 1e-12);
        // thresholds compare ratios, which scaling leaves equal up to rounding
        prop_assert!((a.delta1 - b.delta1).abs() <= 1.0 / p.len() as f64 + 1e-12);
    }

    #[test]
    fn delta_m_self_baseline_is_zero(s in 0.01f64..100.0, r in 0.01f64..100.0) {
        prop_assert_eq!(delta_m(&map(s, r), &map(s, r), &representative_directions()).unwrap(), 0.0);
    }

    #[test]
    fn delta_m_ignores_insertion_order(s in 0.01f64..100.0, r in 0.01f64..100.0, bs in 0.01f64..100.0, br in 0.01f64..100.0) {
        let d = representative_directions();
        let mut m2 = BTreeMap::new();
        m2.insert(Task::Depth, r);
        m2.insert(Task::Seg, s);
        prop_assert_eq!(delta_m(&map(s, r), &map(bs, br), &d).unwrap(), delta_m(&m2, &map(bs, br), &d).unwrap());
    }

    #[test]
    fn delta_m_is_monotone(s in 0.01f64..100.0, r in 0.01f64..100.0, ds in 0.01f64..10.0, dr in 0.001f64..0.009) {
        let d = representative_directions();
        let base = map(50.0, 5.0);
        let v = delta_m(&map(s, r), &base, &d).unwrap();
        prop_assert!(delta_m(&map(s + ds, r), &base, &d).unwrap() > v);
        prop_assert!(delta_m(&map(s, r + dr), &base, &d).unwrap() < v);
    }
}
