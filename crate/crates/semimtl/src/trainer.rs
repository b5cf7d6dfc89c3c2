//! Alternating optimization over datasets and tasks.
//!
//! One iteration visits every dataset once in round-robin order. For each
//! batch the generator is stepped once (SGD, discriminators frozen) on
//!
//! ```text
//! Σ_t labeled:   w_t·L_gt + λ_intra·L_intra
//!     unlabeled: λ_inter·L_inter
//! ```
//!
//! and detached ground-truth/prediction maps are queued. After the last dataset
//! each discriminator takes one Adam step (generator frozen) on the sum of its
//! queued cross-entropy terms.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use synscene::{make_dataset, make_test_dataset, BatchIterator, Dataset, DatasetSpec, DomainConfig, Task};
use tensorcore::{poly_lr, AdamConfig, AdamState, SgdConfig, SgdState, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::{
    berhu_loss, discriminator_objective, generator_objective, inter_adv_loss, intra_adv_loss, seg_ce_loss,
    AlignmentMode, InterClasses, LossWeights, Reduction, TaskTerms, GT_CLASS,
};
use crate::metrics::{evaluate, DatasetMetrics};
use crate::nets::{
    one_hot, DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet, ParamGroup, TrainabilityMask,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainerMode {
    #[serde(rename = "STL_seg")]
    StlSeg,
    #[serde(rename = "STL_depth")]
    StlDepth,
    #[serde(rename = "JTL")]
    Jtl,
    #[serde(rename = "SemiSD")]
    SemiSd,
    #[serde(rename = "SemiMTL_M1")]
    SemiMtlM1,
    #[serde(rename = "SemiMTL_M2")]
    SemiMtlM2,
    #[serde(rename = "SemiMTL_M3")]
    SemiMtlM3,
}

/// How the discriminators classify their inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adversary {
    /// Ground truth vs any prediction; every adversarial term targets class 0.
    Binary,
    /// Ground truth plus one class per dataset, with the given inter-domain mode.
    DomainAware(AlignmentMode),
}

impl TrainerMode {
    pub const ALL: [TrainerMode; 7] = [
        TrainerMode::StlSeg,
        TrainerMode::StlDepth,
        TrainerMode::Jtl,
        TrainerMode::SemiSd,
        TrainerMode::SemiMtlM1,
        TrainerMode::SemiMtlM2,
        TrainerMode::SemiMtlM3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainerMode::StlSeg => "STL_seg",
            TrainerMode::StlDepth => "STL_depth",
            TrainerMode::Jtl => "JTL",
            TrainerMode::SemiSd => "SemiSD",
            TrainerMode::SemiMtlM1 => "SemiMTL_M1",
            TrainerMode::SemiMtlM2 => "SemiMTL_M2",
            TrainerMode::SemiMtlM3 => "SemiMTL_M3",
        }
    }

    /// Tasks the generator is trained on.
    pub fn tasks(self) -> Vec<Task> {
        match self {
            TrainerMode::StlSeg => vec![Task::Seg],
            TrainerMode::StlDepth => vec![Task::Depth],
            _ => Task::ALL.to_vec(),
        }
    }

    pub fn adversary(self) -> Option<Adversary> {
        match self {
            TrainerMode::StlSeg | TrainerMode::StlDepth | TrainerMode::Jtl => None,
            TrainerMode::SemiSd => Some(Adversary::Binary),
            TrainerMode::SemiMtlM1 => Some(Adversary::DomainAware(AlignmentMode::M1)),
            TrainerMode::SemiMtlM2 => Some(Adversary::DomainAware(AlignmentMode::M2)),
            TrainerMode::SemiMtlM3 => Some(Adversary::DomainAware(AlignmentMode::M3)),
        }
    }

    pub fn is_single_task(self) -> bool {
        matches!(self, TrainerMode::StlSeg | TrainerMode::StlDepth)
    }
}

impl fmt::Display for TrainerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainerMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown trainer mode {s:?}")))
    }
}

fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn default_poly_power() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub mode: TrainerMode,
    pub datasets: Vec<DatasetSpec>,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Evaluate on the held-out splits every this many iterations; 0 disables.
    #[serde(default)]
    pub eval_interval: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    /// Random horizontal flips.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Record per-task gradient norms on the shared encoder (one extra reverse
    /// sweep per task per step).
    #[serde(default)]
    pub diagnostics: bool,
}

/// Two domains: dataset 1 labels segmentation, dataset 2 labels depth.
pub fn default_datasets(seed: u64) -> Vec<DatasetSpec> {
    let a = DomainConfig::neutral(1);
    let b = DomainConfig {
        domain_id: 2,
        palette_shift: [0.12, 0.04, -0.12],
        noise_sigma: 0.06,
        object_density: 3.0,
        illumination_gain: 0.75,
    };
    vec![
        DatasetSpec::new("A", a, &[Task::Seg], seed.wrapping_mul(2).wrapping_add(1)),
        DatasetSpec::new("B", b, &[Task::Depth], seed.wrapping_mul(2).wrapping_add(2)),
    ]
}

impl TrainConfig {
    /// Desk-scale defaults: two domains, 2000 iterations, batch 8.
    pub fn desk(mode: TrainerMode, seed: u64) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            mode,
            datasets: default_datasets(seed),
            iterations: 2000,
            batch_size: 8,
            seed,
            weights: LossWeights::default(),
            reduction: Reduction::Mean,
            sgd: SgdConfig::default(),
            poly_power: default_poly_power(),
            adam: AdamConfig::default(),
            eval_interval: 0,
            output_dir: None,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            augment: true,
            diagnostics: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.iterations < 1 || self.batch_size < 1 {
            return Err(Error::config("iterations and batch_size must be >= 1"));
        }
        if self.datasets.is_empty() {
            return Err(Error::config("at least one dataset is required"));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let mut ids: Vec<u32> = self.datasets.iter().map(|d| d.domain.domain_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.datasets.len() {
            return Err(Error::config("domain ids must be unique"));
        }
        let first = &self.datasets[0];
        for d in &self.datasets {
            d.validate()?;
            if d.image_size != first.image_size || d.num_classes != self.generator.num_classes {
                return Err(Error::config(format!(
                    "dataset {:?} must use image_size {} and {} classes",
                    d.name, first.image_size, self.generator.num_classes
                )));
            }
        }
        for t in self.mode.tasks() {
            if !self.datasets.iter().any(|d| d.labels(t)) {
                return Err(Error::config(format!("no dataset labels {t}")));
            }
        }
        if self.mode.adversary().is_some() && first.image_size < self.discriminator.min_input() {
            return Err(Error::config(format!(
                "discriminators need images of at least {0}x{0}",
                self.discriminator.min_input()
            )));
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Independent random streams derived from the run seed. Modes share the
/// generator and data streams, so they start from identical weights and see
/// identical batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Generator = 1,
    Discriminator = 2,
    Data = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskComponents {
    pub gt: Option<f64>,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

/// One generator step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub dataset_id: usize,
    /// `None` when the batch contributed no term (no generator step taken).
    pub loss_g: Option<f64>,
    pub tasks: BTreeMap<Task, TaskComponents>,
    /// Squared-norm of each task's gradient on θ^sh, when diagnostics are on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_grad_sq: Option<BTreeMap<Task, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub steps: Vec<StepRecord>,
    /// Discriminator objective per task.
    pub loss_d: BTreeMap<Task, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub datasets: Vec<DatasetMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Iteration(IterationRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Iteration(r) => Some(r),
            LogEntry::Eval(_) => None,
        })
    }

    /// Generator losses in step order.
    pub fn generator_losses(&self) -> Vec<Option<f64>> {
        self.iterations().flat_map(|r| r.steps.iter().map(|s| s.loss_g)).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries =
            text.lines().filter(|l| !l.is_empty()).map(serde_json::from_str).collect::<serde_json::Result<_>>()?;
        Ok(Self { entries })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Discriminator,
}

/// Detached map queued for a discriminator update.
#[derive(Clone, Debug, PartialEq)]
struct Queued {
    class: usize,
    map: Tensor,
}

/// Full training state.
pub struct Trainer {
    pub(crate) cfg: TrainConfig,
    datasets: Vec<Dataset>,
    pub(crate) gen: GeneratorNet,
    pub(crate) discs: BTreeMap<Task, DiscriminatorNet>,
    pub(crate) sgd: SgdState,
    pub(crate) adams: BTreeMap<Task, AdamState>,
    pub(crate) batches: BatchIterator,
    pub(crate) iteration: u64,
    queue: BTreeMap<Task, Vec<Queued>>,
    lr_g: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let datasets = cfg.datasets.iter().map(make_dataset).collect::<synscene::Result<Vec<_>>>()?;
        let gen = GeneratorNet::build(&cfg.generator, &mut stream_rng(cfg.seed, Stream::Generator))?;
        let mut discs = BTreeMap::new();
        let mut adams = BTreeMap::new();
        if let Some(adv) = cfg.mode.adversary() {
            let k = match adv {
                Adversary::Binary => 1,
                Adversary::DomainAware(_) => cfg.datasets.len(),
            };
            let mut rng = stream_rng(cfg.seed, Stream::Discriminator);
            for t in cfg.mode.tasks() {
                let cin = match t {
                    Task::Seg => cfg.generator.num_classes,
                    Task::Depth => 1,
                };
                discs.insert(t, DiscriminatorNet::build(t, cin, k, &cfg.discriminator, &mut rng)?);
                adams.insert(t, AdamState::default());
            }
        }
        let data_seed = stream_rng(cfg.seed, Stream::Data).next_u64();
        let batches = BatchIterator::new(&datasets, cfg.batch_size, data_seed, cfg.augment)?;
        Ok(Self {
            cfg,
            datasets,
            gen,
            discs,
            sgd: SgdState::default(),
            adams,
            batches,
            iteration: 0,
            queue: BTreeMap::new(),
            lr_g: 0.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &GeneratorNet {
        &self.gen
    }

    pub fn generator_mut(&mut self) -> &mut GeneratorNet {
        &mut self.gen
    }

    pub fn discriminators(&self) -> &BTreeMap<Task, DiscriminatorNet> {
        &self.discs
    }

    pub fn sgd_state(&self) -> &SgdState {
        &self.sgd
    }

    pub fn adam_states(&self) -> &BTreeMap<Task, AdamState> {
        &self.adams
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    /// Trainable flags of every parameter group in the model.
    pub fn mask(&self) -> TrainabilityMask {
        let mut m = self.gen.store().mask();
        for d in self.discs.values() {
            m.extend(d.store().mask());
        }
        m
    }

    pub fn set_trainable(&mut self, group: ParamGroup, flag: bool) -> Result<()> {
        match group {
            ParamGroup::Shared | ParamGroup::SegDecoder | ParamGroup::DepthDecoder => {
                self.gen.store_mut().set_trainable(group, flag)
            }
            ParamGroup::SegDiscriminator | ParamGroup::DepthDiscriminator => {
                let task = if group == ParamGroup::SegDiscriminator { Task::Seg } else { Task::Depth };
                self.discs
                    .get_mut(&task)
                    .ok_or_else(|| Error::UnknownGroup(group.name().to_string()))?
                    .store_mut()
                    .set_trainable(group, flag)
            }
        }
    }

    /// Freezes the side not being optimized.
    pub fn enter_phase(&mut self, phase: Phase) -> Result<()> {
        let g = phase == Phase::Generator;
        for group in self.gen.store().groups() {
            self.gen.store_mut().set_trainable(group, g)?;
        }
        for d in self.discs.values_mut() {
            for group in d.store().groups() {
                d.store_mut().set_trainable(group, !g)?;
            }
        }
        Ok(())
    }

    /// Domain class of predictions from dataset `id` (1-based).
    fn domain_class(&self, id: usize) -> usize {
        match self.cfg.mode.adversary() {
            Some(Adversary::Binary) => 1,
            _ => id,
        }
    }

    fn inter_classes(&self, task: Task, id: usize) -> InterClasses {
        let labeled = self.cfg.datasets.iter().position(|d| d.labels(task)).map_or(1, |i| i + 1);
        InterClasses { labeled: self.domain_class(labeled), unlabeled: self.domain_class(id) }
    }

    fn check_finite(&self, what: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { iteration: self.iteration + 1, detail: format!("{what} = {v}") })
        }
    }

    /// Learning rate of the generator at 1-based iteration `i`.
    pub fn generator_lr(&self, i: u64) -> Result<f64> {
        Ok(poly_lr(i, self.cfg.iterations, self.cfg.sgd.lr, self.cfg.poly_power)?)
    }

    /// Draws the next batch and takes one generator step on it.
    pub fn generator_step(&mut self) -> Result<StepRecord> {
        self.enter_phase(Phase::Generator)?;
        let batch = self.batches.next_batch(&self.datasets)?;
        let k = batch.dataset_id;
        let (n, _, h, w) = batch.images.dims4()?;
        let tasks = self.cfg.mode.tasks();
        let adversary = self.cfg.mode.adversary();
        let reduction = self.cfg.reduction;

        let mut tape = Tape::new();
        let gv = self.gen.store().bind(&mut tape);
        let dv: BTreeMap<Task, Vec<Var>> = self.discs.iter().map(|(t, d)| (*t, d.store().bind(&mut tape))).collect();
        let x = tape.constant(batch.images.clone());
        let out = self.gen.forward(&mut tape, &gv, x, &tasks)?;

        let mut terms = Vec::new();
        let mut record = BTreeMap::new();
        let mut queued: Vec<(Task, Queued)> = Vec::new();
        for &t in &tasks {
            let (d_input, gt_map, supervised) = match t {
                Task::Seg => {
                    let logits = out.seg_logits.expect("seg head requested");
                    let probs = tape.softmax_channel(logits)?;
                    let (gt, sup) = match &batch.seg {
                        Some(labels) => {
                            let c = self.cfg.generator.num_classes;
                            (Some(one_hot(labels, n, c, h, w)?), Some(seg_ce_loss(&mut tape, logits, labels)?))
                        }
                        None => (None, None),
                    };
                    (probs, gt, sup)
                }
                Task::Depth => {
                    let d = out.inv_depth.expect("depth head requested");
                    let (gt, sup) = match &batch.inv_depth {
                        Some(y) => {
                            let yv = tape.constant(y.clone());
                            (Some(y.clone()), Some(berhu_loss(&mut tape, d, yv)?))
                        }
                        None => (None, None),
                    };
                    (d, gt, sup)
                }
            };
            let classes = self.inter_classes(t, k);
            let mut comp = TaskComponents { gt: supervised.map(|v| tape.value(v).data()[0]), ..Default::default() };
            let mut term = TaskTerms { task: t, supervised, intra: None, inter: None };
            if let (Some(adv), Some(d)) = (adversary, self.discs.get_mut(&t)) {
                let logits = d.forward(&mut tape, &dv[&t], d_input)?;
                let class = classes.unlabeled;
                if let Some(gt) = gt_map {
                    let v = intra_adv_loss(&mut tape, logits, reduction)?;
                    comp.intra = Some(tape.value(v).data()[0]);
                    term.intra = Some(v);
                    queued.push((t, Queued { class: GT_CLASS, map: gt }));
                } else {
                    let mode = match adv {
                        Adversary::Binary => AlignmentMode::M2,
                        Adversary::DomainAware(m) => m,
                    };
                    let v = inter_adv_loss(&mut tape, logits, mode, classes, reduction)?;
                    comp.inter = Some(tape.value(v).data()[0]);
                    term.inter = Some(v);
                }
                queued.push((t, Queued { class, map: tape.value(d_input).clone() }));
            }
            if term.supervised.is_some() || term.intra.is_some() || term.inter.is_some() {
                terms.push(term);
                record.insert(t, comp);
            }
        }

        let mut rec = StepRecord { dataset_id: k, loss_g: None, tasks: record, shared_grad_sq: None };
        for (t, q) in queued {
            self.queue.entry(t).or_default().push(q);
        }
        if terms.is_empty() {
            return Ok(rec);
        }
        let loss = generator_objective(&mut tape, &terms, &self.cfg.weights)?;
        let lv = self.check_finite("generator loss", tape.value(loss).data()[0])?;
        rec.loss_g = Some(lv);

        if self.cfg.diagnostics {
            let shared: Vec<usize> =
                (0..gv.len()).filter(|&i| self.gen.store().params()[i].group == ParamGroup::Shared).collect();
            let mut norms = BTreeMap::new();
            for term in &terms {
                let single = generator_objective(&mut tape, std::slice::from_ref(term), &self.cfg.weights)?;
                let g = tape.backward(single)?;
                let sq: f64 = shared.iter().filter_map(|&i| g.get(gv[i])).flat_map(|s| s.iter()).map(|v| v * v).sum();
                norms.insert(term.task, sq);
            }
            rec.shared_grad_sq = Some(norms);
        }

        let grads = tape.backward(loss)?;
        self.gen.store_mut().accumulate(&grads, &gv)?;
        for p in self.gen.store().params() {
            if p.value.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    iteration: self.iteration + 1,
                    detail: format!("gradient of {}", p.name),
                });
            }
        }
        let lr = self.lr_g;
        self.sgd.step(self.gen.store_mut().tensors_mut(), lr, &self.cfg.sgd)?;
        self.gen.store_mut().clear_grads();
        Ok(rec)
    }

    /// One Adam step per discriminator on its queued terms.
    pub fn discriminator_step(&mut self) -> Result<BTreeMap<Task, f64>> {
        self.enter_phase(Phase::Discriminator)?;
        let mut losses = BTreeMap::new();
        let queue = std::mem::take(&mut self.queue);
        for (t, items) in queue {
            let Some(d) = self.discs.get_mut(&t) else { continue };
            let mut tape = Tape::new();
            let dv = d.store().bind(&mut tape);
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for q in items {
                let v = tape.constant(q.map);
                if q.class == GT_CLASS {
                    gts.push(v);
                } else {
                    preds.push((q.class, v));
                }
            }
            let loss = discriminator_objective(&mut tape, d, &dv, &gts, &preds, self.cfg.reduction)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    iteration: self.iteration + 1,
                    detail: format!("{t} discriminator loss"),
                });
            }
            let grads = tape.backward(loss)?;
            d.store_mut().accumulate(&grads, &dv)?;
            let adam = self.adams.get_mut(&t).expect("one Adam state per discriminator");
            adam.step(d.store_mut().tensors_mut(), &self.cfg.adam)?;
            d.store_mut().clear_grads();
            losses.insert(t, lv);
        }
        self.enter_phase(Phase::Generator)?;
        Ok(losses)
    }

    /// Sets the generator learning rate for the next iteration.
    pub fn begin_iteration(&mut self) -> Result<u64> {
        let i = self.iteration + 1;
        if i > self.cfg.iterations {
            return Err(Error::config(format!("run already finished {} iterations", self.cfg.iterations)));
        }
        self.lr_g = self.generator_lr(i)?;
        Ok(i)
    }

    pub fn train_iteration(&mut self) -> Result<IterationRecord> {
        let i = self.begin_iteration()?;
        let steps = (0..self.datasets.len()).map(|_| self.generator_step()).collect::<Result<Vec<_>>>()?;
        let loss_d = self.discriminator_step()?;
        self.iteration = i;
        Ok(IterationRecord { iteration: i, lr_g: self.lr_g, lr_d: self.cfg.adam.lr, steps, loss_d })
    }

    /// Metrics on every dataset's held-out split.
    pub fn evaluate(&self) -> Result<Vec<DatasetMetrics>> {
        self.cfg
            .datasets
            .iter()
            .map(|spec| {
                let test = make_test_dataset(spec)?;
                let mut m = evaluate(&self.gen, &test)?;
                m.dataset = spec.name.clone();
                Ok(m)
            })
            .collect()
    }

    /// Runs the remaining iterations, writing log lines and checkpoints when
    /// an output directory is configured.
    pub fn run(&mut self, log: &mut TrainLog) -> Result<()> {
        let out = self.cfg.output_dir.clone();
        let mut writer = match &out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let f = fs::OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
                Some(std::io::BufWriter::new(f))
            }
            None => None,
        };
        let mut emit = |e: LogEntry, log: &mut TrainLog| -> Result<()> {
            if let Some(w) = writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&e)?)?;
            }
            log.entries.push(e);
            Ok(())
        };
        while self.iteration < self.cfg.iterations {
            let rec = self.train_iteration()?;
            let i = rec.iteration;
            emit(LogEntry::Iteration(rec), log)?;
            let last = i == self.cfg.iterations;
            if self.cfg.eval_interval > 0 && (i % self.cfg.eval_interval == 0 || last) {
                let datasets = self.evaluate()?;
                emit(LogEntry::Eval(EvalRecord { iteration: i, datasets }), log)?;
                if let Some(dir) = &out {
                    crate::checkpoint::save_atomic(self, &dir.join("checkpoint"))?;
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        if let Some(dir) = &out {
            crate::checkpoint::save_atomic(self, &dir.join("checkpoint"))?;
        }
        Ok(())
    }
}

/// Trains from scratch.
pub fn train(cfg: TrainConfig) -> Result<(Trainer, TrainLog)> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log = TrainLog::default();
    trainer.run(&mut log)?;
    Ok((trainer, log))
}

/// Continues a checkpointed run to its configured iteration count.
pub fn resume(checkpoint: &Path) -> Result<(Trainer, TrainLog)> {
    let mut trainer = crate::checkpoint::load(checkpoint)?;
    let mut log = TrainLog::default();
    trainer.run(&mut log)?;
    Ok((trainer, log))
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn mode_names_round_trip() {
        for m in TrainerMode::ALL {
            assert_eq!(m.name().parse::<TrainerMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("STL".parse::<TrainerMode>().is_err());
    }

    #[test]
    fn discriminator_layout_per_mode() {
        let t = Trainer::new(tiny(TrainerMode::SemiSd)).unwrap();
        assert!(t.discriminators().values().all(|d| d.num_classes() == 2));
        let t = Trainer::new(tiny(TrainerMode::SemiMtlM2)).unwrap();
        assert!(t.discriminators().values().all(|d| d.num_classes() == 3));
        assert_eq!(t.discriminators().len(), 2);
        let t = Trainer::new(tiny(TrainerMode::Jtl)).unwrap();
        assert!(t.discriminators().is_empty());
    }

    #[test]
    fn validation_rejects_unlabeled_task() {
        let mut cfg = tiny(TrainerMode::Jtl);
        cfg.datasets[1].labeled_tasks = [Task::Seg].into_iter().collect();
        assert!(Trainer::new(cfg.clone()).is_err());
        cfg.mode = TrainerMode::StlSeg;
        assert!(Trainer::new(cfg).is_ok());
        let mut cfg = tiny(TrainerMode::Jtl);
        cfg.iterations = 0;
        assert!(Trainer::new(cfg).is_err());
    }

    #[test]
    fn cadence_and_final_lr() {
        let (t, log) = train(tiny(TrainerMode::SemiMtlM1)).unwrap();
        assert_eq!(t.sgd_state().steps, 6);
        assert!(t.adam_states().values().all(|a| a.steps == 3));
        let recs: Vec<_> = log.iterations().collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].lr_g, 0.0);
        assert!(recs.iter().all(|r| r.steps.iter().map(|s| s.dataset_id).eq([1, 2])));
        assert!(recs.iter().all(|r| r.loss_d.len() == 2));
    }

    #[test]
    fn unknown_group_is_error() {
        let mut t = Trainer::new(tiny(TrainerMode::Jtl)).unwrap();
        assert!(matches!(t.set_trainable(ParamGroup::SegDiscriminator, false), Err(Error::UnknownGroup(_))));
        t.set_trainable(ParamGroup::Shared, false).unwrap();
        assert!(!t.mask()[&ParamGroup::Shared]);
    }
}
