//! Multi-mode, multi-seed experiments and the cross-method comparison table.
//!
//! Every mode trains on the same dataset specs with the same seeds, so modes
//! of one seed share generator initialization and batch order. `STL_seg` and
//! `STL_depth` merge into one `STL` row (segmentation metrics from the former,
//! depth metrics from the latter), which is the ΔM baseline of every row.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synscene::Task;

use crate::error::{Error, Result};
use crate::metrics::{delta_m, representative_directions, DatasetMetrics};
use crate::trainer::{train, TrainConfig, TrainerMode};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;
pub const TABLE_SCHEMA_VERSION: u32 = 1;

/// Name of the merged single-task baseline row.
pub const STL_METHOD: &str = "STL";

fn default_schema() -> u32 {
    EXPERIMENT_SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    /// Shared settings; `mode` and `seed` are overridden per run.
    pub base: TrainConfig,
    pub modes: Vec<TrainerMode>,
    pub seeds: Vec<u64>,
    /// Where per-run checkpoints and logs go (`<dir>/runs/<mode>/seed<s>`).
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("an experiment needs at least one mode and one seed"));
        }
        let mut modes = self.modes.clone();
        modes.sort_unstable();
        modes.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if modes.len() != self.modes.len() || seeds.len() != self.seeds.len() {
            return Err(Error::config("modes and seeds must be unique"));
        }
        for &m in &self.modes {
            self.run_config(m, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    /// The training config of one run.
    pub fn run_config(&self, mode: TrainerMode, seed: u64) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.mode = mode;
        cfg.seed = seed;
        cfg.output_dir = self.output_dir.as_ref().map(|d| d.join("runs").join(mode.name()).join(format!("seed{seed}")));
        cfg
    }

    /// Hex SHA-256 of the canonical config JSON.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_string(self)?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Metric values of one method on one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub pacc: f64,
    pub miou: f64,
    pub abr: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_fraction: f64,
    /// Percent gain over the STL row; absent without a complete STL baseline.
    pub delta_m: Option<f64>,
}

impl MetricValues {
    /// Field names in table column order.
    pub const FIELDS: [&'static str; 9] =
        ["pacc", "miou", "abr", "rmse", "delta1", "delta2", "delta3", "valid_fraction", "delta_m"];

    fn from_parts(seg: &DatasetMetrics, depth: &DatasetMetrics) -> Self {
        Self {
            pacc: seg.seg.pacc,
            miou: seg.seg.miou,
            abr: depth.depth.abr,
            rmse: depth.depth.rmse,
            delta1: depth.depth.delta1,
            delta2: depth.depth.delta2,
            delta3: depth.depth.delta3,
            valid_fraction: depth.depth.valid_fraction,
            delta_m: None,
        }
    }

    /// Values in [`Self::FIELDS`] order.
    pub fn values(&self) -> [Option<f64>; 9] {
        [
            Some(self.pacc),
            Some(self.miou),
            Some(self.abr),
            Some(self.rmse),
            Some(self.delta1),
            Some(self.delta2),
            Some(self.delta3),
            Some(self.valid_fraction),
            self.delta_m,
        ]
    }

    fn from_values(v: [Option<f64>; 9]) -> Self {
        let f = |i: usize| v[i].unwrap_or(f64::NAN);
        Self {
            pacc: f(0),
            miou: f(1),
            abr: f(2),
            rmse: f(3),
            delta1: f(4),
            delta2: f(5),
            delta3: f(6),
            valid_fraction: f(7),
            delta_m: v[8],
        }
    }

    pub fn representative(&self) -> BTreeMap<Task, f64> {
        BTreeMap::from([(Task::Seg, self.miou), (Task::Depth, self.rmse)])
    }
}

/// One seed's outcome for a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<MetricValues>,
    /// Why the run produced no metrics.
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// Some seeds failed; mean and std cover the rest.
    Partial,
    Failed,
}

impl RowStatus {
    pub fn name(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Partial => "partial",
            RowStatus::Failed => "failed",
        }
    }
}

/// One method on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub dataset: String,
    pub status: RowStatus,
    pub runs: Vec<SeedResult>,
    /// Mean over successful seeds.
    pub mean: Option<MetricValues>,
    /// Sample standard deviation over successful seeds (0 for one seed).
    pub std: Option<MetricValues>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub modes: Vec<TrainerMode>,
    pub datasets: Vec<String>,
    /// Method-major, datasets in config order.
    pub rows: Vec<TableRow>,
}

impl ExperimentTable {
    pub fn row(&self, method: &str, dataset: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method && r.dataset == dataset)
    }

    /// Distinct methods in row order.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }
}

type RunResult = std::result::Result<Vec<DatasetMetrics>, String>;

/// Table methods and the modes supplying their (segmentation, depth) metrics.
fn methods(modes: &[TrainerMode]) -> Vec<(String, TrainerMode, TrainerMode)> {
    let merged = modes.contains(&TrainerMode::StlSeg) && modes.contains(&TrainerMode::StlDepth);
    let mut out = Vec::new();
    for &m in modes {
        if merged && matches!(m, TrainerMode::StlSeg | TrainerMode::StlDepth) {
            if !out.iter().any(|(name, _, _)| name == STL_METHOD) {
                out.push((STL_METHOD.to_string(), TrainerMode::StlSeg, TrainerMode::StlDepth));
            }
        } else {
            out.push((m.name().to_string(), m, m));
        }
    }
    out
}

fn combine(seg: &RunResult, depth: &RunResult, dataset: usize) -> std::result::Result<MetricValues, String> {
    let s = seg.as_ref().map_err(Clone::clone)?;
    let d = depth.as_ref().map_err(Clone::clone)?;
    Ok(MetricValues::from_parts(&s[dataset], &d[dataset]))
}

fn stats(values: &[MetricValues]) -> Option<(MetricValues, MetricValues)> {
    if values.is_empty() {
        return None;
    }
    let cols: Vec<[Option<f64>; 9]> = values.iter().map(MetricValues::values).collect();
    let mut mean = [None; 9];
    let mut std = [None; 9];
    for i in 0..9 {
        let xs: Vec<f64> = cols.iter().filter_map(|c| c[i]).collect();
        if xs.is_empty() {
            continue;
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        mean[i] = Some(m);
        std[i] = Some(var.sqrt());
    }
    Some((MetricValues::from_values(mean), MetricValues::from_values(std)))
}

/// Trains every mode for every seed and tabulates held-out metrics.
///
/// A failed run marks its cells instead of aborting the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentTable> {
    run_experiment_with(cfg, &mut |_| {})
}

/// [`run_experiment`] with a progress callback invoked after every run.
pub fn run_experiment_with(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<ExperimentTable> {
    cfg.validate()?;
    let mut results: BTreeMap<(TrainerMode, u64), RunResult> = BTreeMap::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            let outcome = train(cfg.run_config(mode, seed)).and_then(|(t, _)| t.evaluate()).map_err(|e| e.to_string());
            progress(&match &outcome {
                Ok(_) => format!("{mode} seed {seed}: done"),
                Err(e) => format!("{mode} seed {seed}: failed: {e}"),
            });
            results.insert((mode, seed), outcome);
        }
    }
    tabulate(cfg, &results)
}

fn tabulate(cfg: &ExperimentConfig, results: &BTreeMap<(TrainerMode, u64), RunResult>) -> Result<ExperimentTable> {
    let datasets: Vec<String> = cfg.base.datasets.iter().map(|d| d.name.clone()).collect();
    let methods = methods(&cfg.modes);
    let has_stl = methods.iter().any(|(name, _, _)| name == STL_METHOD);
    let directions = representative_directions();
    let mut rows = Vec::new();
    for (name, seg_mode, depth_mode) in &methods {
        for (di, dataset) in datasets.iter().enumerate() {
            let mut runs = Vec::new();
            for &seed in &cfg.seeds {
                let cell = combine(&results[&(*seg_mode, seed)], &results[&(*depth_mode, seed)], di);
                let baseline = has_stl.then(|| {
                    combine(&results[&(TrainerMode::StlSeg, seed)], &results[&(TrainerMode::StlDepth, seed)], di)
                });
                runs.push(match cell {
                    Ok(mut m) => {
                        if let Some(Ok(b)) = baseline {
                            m.delta_m = Some(delta_m(&m.representative(), &b.representative(), &directions)?);
                        }
                        SeedResult { seed, metrics: Some(m), failure: None }
                    }
                    Err(e) => SeedResult { seed, metrics: None, failure: Some(e) },
                });
            }
            let ok: Vec<MetricValues> = runs.iter().filter_map(|r| r.metrics).collect();
            let status = match ok.len() {
                0 => RowStatus::Failed,
                n if n == runs.len() => RowStatus::Ok,
                _ => RowStatus::Partial,
            };
            let (mean, std) = stats(&ok).map_or((None, None), |(m, s)| (Some(m), Some(s)));
            rows.push(TableRow { method: name.clone(), dataset: dataset.clone(), status, runs, mean, std });
        }
    }
    Ok(ExperimentTable {
        schema_version: TABLE_SCHEMA_VERSION,
        config_hash: cfg.hash()?,
        seeds: cfg.seeds.clone(),
        modes: cfg.modes.clone(),
        datasets,
        rows,
    })
}
