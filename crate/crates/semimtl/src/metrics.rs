//! Segmentation and depth metrics, the multi-task gain ΔM, and test-set
//! evaluation of a generator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use synscene::{Dataset, Sample, Task};
use tensorcore::Tensor;

use crate::error::{Error, Result};
use crate::nets::GeneratorNet;

/// Confusion counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::config(format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= self.classes || g >= self.classes {
                return Err(Error::config(format!("label {} out of range for {} classes", p.max(g), self.classes)));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn metrics(&self) -> Result<SegMetrics> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::config("segmentation metrics over zero pixels"));
        }
        let c = self.classes;
        let correct: u64 = (0..c).map(|k| self.get(k, k)).sum();
        let mut ious = Vec::new();
        for k in 0..c {
            let tp = self.get(k, k);
            let gt_k: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let pred_k: u64 = (0..c).map(|j| self.get(j, k)).sum();
            let union = gt_k + pred_k - tp;
            if union > 0 {
                ious.push(tp as f64 / union as f64);
            }
        }
        Ok(SegMetrics { pacc: correct as f64 / total as f64, miou: ious.iter().sum::<f64>() / ious.len() as f64 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pacc: f64,
    /// Mean IoU over classes present in ground truth or prediction.
    pub miou: f64,
}

pub fn seg_metrics(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    cm.metrics()
}

/// Running sums over pixels with `gt > 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    valid: u64,
    total: u64,
    abs_rel: f64,
    sq: f64,
    within: [u64; 3],
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::config(format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
        }
        self.total += gt.len() as u64;
        for (&p, &y) in pred.iter().zip(gt) {
            if y <= 0.0 {
                continue;
            }
            self.valid += 1;
            let e = p - y;
            self.abs_rel += e.abs() / y;
            self.sq += e * e;
            let ratio = if p > 0.0 { (p / y).max(y / p) } else { f64::INFINITY };
            for (i, w) in self.within.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(i as i32 + 1) {
                    *w += 1;
                }
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<DepthMetrics> {
        if self.valid == 0 {
            return Err(Error::config("depth metrics need at least one pixel with gt > 0"));
        }
        let n = self.valid as f64;
        Ok(DepthMetrics {
            abr: self.abs_rel / n,
            rmse: (self.sq / n).sqrt(),
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            valid_fraction: n / self.total as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abr: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Fraction of pixels with `gt > 0`.
    pub valid_fraction: f64,
}

/// Depth metrics over pixels with `gt > 0`.
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt)?;
    acc.metrics()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    HigherIsBetter,
    LowerIsBetter,
}

impl MetricDirection {
    fn sign(self) -> f64 {
        match self {
            MetricDirection::HigherIsBetter => 1.0,
            MetricDirection::LowerIsBetter => -1.0,
        }
    }
}

/// mIoU for segmentation (higher is better), RMSE for depth (lower is better).
pub fn representative_directions() -> BTreeMap<Task, MetricDirection> {
    BTreeMap::from([(Task::Seg, MetricDirection::HigherIsBetter), (Task::Depth, MetricDirection::LowerIsBetter)])
}

/// Average signed relative gain over tasks, in percent.
pub fn delta_m(
    model: &BTreeMap<Task, f64>,
    baseline: &BTreeMap<Task, f64>,
    directions: &BTreeMap<Task, MetricDirection>,
) -> Result<f64> {
    if model.is_empty() || !model.keys().eq(baseline.keys()) {
        return Err(Error::config("delta_m needs the same non-empty task set for model and baseline"));
    }
    let mut total = 0.0;
    for (task, &m) in model {
        let b = baseline[task];
        if b == 0.0 {
            return Err(Error::config(format!("zero baseline for {task}")));
        }
        let dir = directions.get(task).ok_or_else(|| Error::config(format!("no metric direction for {task}")))?;
        total += dir.sign() * (m - b) / b;
    }
    Ok(100.0 * total / model.len() as f64)
}

/// Both tasks' metrics on one dataset's held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub samples: usize,
    pub seg: SegMetrics,
    pub depth: DepthMetrics,
}

impl DatasetMetrics {
    /// The ΔM representative metric per task.
    pub fn representative(&self) -> BTreeMap<Task, f64> {
        BTreeMap::from([(Task::Seg, self.seg.miou), (Task::Depth, self.depth.rmse)])
    }
}

pub const EVAL_BATCH: usize = 16;

fn argmax_channels(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for s in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if x[(b * c + k) * hw + s] > x[(b * c + best) * hw + s] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Evaluates both heads on every sample's full ground truth.
pub fn evaluate(net: &GeneratorNet, ds: &Dataset) -> Result<DatasetMetrics> {
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    let mut acc = DepthAccumulator::default();
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_BATCH).min(ds.len());
        let samples: Vec<&Sample> = (start..end).map(|i| ds.eval_view(i)).collect::<synscene::Result<_>>()?;
        let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let (logits, depth) = net.predict(&images)?;
        let pred = argmax_channels(&logits)?;
        let mut gt_seg = Vec::with_capacity(pred.len());
        let mut gt_depth = Vec::with_capacity(pred.len());
        for s in &samples {
            let seg = s.seg.as_ref().ok_or_else(|| Error::config("evaluation sample lacks segmentation"))?;
            gt_seg.extend(seg.iter().map(|&c| c as usize));
            let d = s.inv_depth.as_ref().ok_or_else(|| Error::config("evaluation sample lacks depth"))?;
            gt_depth.extend_from_slice(d.data());
        }
        cm.add(&pred, &gt_seg)?;
        acc.add(depth.data(), &gt_depth)?;
        start = end;
    }
    Ok(DatasetMetrics { dataset: ds.spec().name.clone(), samples: ds.len(), seg: cm.metrics()?, depth: acc.metrics()? })
}
