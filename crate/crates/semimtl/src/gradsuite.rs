//! Named finite-difference checks: every differentiable op, every loss, and
//! the composed generator and discriminator objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};
use synscene::Task;
use tensorcore::gradcheck::DEFAULT_STEP;
use tensorcore::{gradcheck, spectral_normalize, SpectralState, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::losses::{
    berhu_loss, disc_ce_loss, discriminator_objective, generator_objective, inter_adv_loss, intra_adv_loss,
    seg_ce_loss, AlignmentMode, InterClasses, LossWeights, Reduction, TaskTerms,
};
use crate::nets::{one_hot, DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet};

/// Bound on the relative error of single ops and losses.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Bound for the composed objectives, whose deeper graphs accumulate more
/// finite-difference error.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Random points per op and loss case.
pub const OP_POINTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Op,
    Loss,
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub kind: CaseKind,
    pub points: usize,
    /// Worst relative error over all points and coordinates.
    pub max_error: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

type PointCheck = fn(&mut ChaCha8Rng) -> Result<f64>;

struct Case {
    name: &'static str,
    kind: CaseKind,
    checks: Vec<PointCheck>,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Ok(Tensor::sample(shape, &Normal::new(0.0, 1.0).expect("unit normal"), rng)?)
}

/// Projects every output coordinate onto the scalar with a fixed nonuniform weight.
fn weighted_sum(t: &mut Tape, y: Var) -> tensorcore::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let n = t.value(y).numel();
    let wts = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0).collect();
    let c = t.constant(Tensor::new(&shape, wts)?);
    let p = t.mul(y, c)?;
    t.sum(p)
}

fn lift(e: Error) -> TensorError {
    match e {
        Error::Tensor(inner) => inner,
        other => TensorError::invalid(other.to_string()),
    }
}

fn check<F>(build: F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> tensorcore::Result<Var>,
{
    Ok(gradcheck(build, point, DEFAULT_STEP)?)
}

/// One random point for an op over inputs of the given shapes.
fn op_point(
    rng: &mut ChaCha8Rng,
    shapes: &[&[usize]],
    f: fn(&mut Tape, &[Var]) -> tensorcore::Result<Var>,
) -> Result<f64> {
    let point = shapes.iter().map(|s| randn(s, rng)).collect::<Result<Vec<_>>>()?;
    check(f, &point)
}

fn op_cases() -> Vec<Case> {
    fn op(name: &'static str, check: PointCheck) -> Case {
        Case { name, kind: CaseKind::Op, checks: vec![check; OP_POINTS] }
    }
    vec![
        op("add", |r| {
            op_point(r, &[&[2, 3], &[2, 3]], |t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }),
        op("sub", |r| {
            op_point(r, &[&[2, 3], &[2, 3]], |t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }),
        op("mul", |r| {
            op_point(r, &[&[2, 3], &[2, 3]], |t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }),
        op("scale", |r| {
            op_point(r, &[&[2, 3]], |t, v| {
                let y = t.scale(v[0], -1.7)?;
                weighted_sum(t, y)
            })
        }),
        op("square", |r| {
            op_point(r, &[&[2, 3]], |t, v| {
                let y = t.square(v[0])?;
                weighted_sum(t, y)
            })
        }),
        op("sum", |r| {
            op_point(r, &[&[2, 3]], |t, v| {
                let y = t.square(v[0])?;
                t.sum(y)
            })
        }),
        op("mean", |r| {
            op_point(r, &[&[2, 3]], |t, v| {
                let y = t.square(v[0])?;
                t.mean(y)
            })
        }),
        op("add_all", |r| {
            op_point(r, &[&[4], &[4], &[4]], |t, v| {
                let y = t.add_all(v)?;
                weighted_sum(t, y)
            })
        }),
        op("leaky_relu", |r| {
            op_point(r, &[&[2, 5]], |t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                weighted_sum(t, y)
            })
        }),
        op("sigmoid", |r| {
            op_point(r, &[&[2, 5]], |t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y)
            })
        }),
        op("softmax_channel", |r| {
            op_point(r, &[&[2, 3, 2, 2]], |t, v| {
                let y = t.softmax_channel(v[0])?;
                weighted_sum(t, y)
            })
        }),
        op("log_softmax_channel", |r| {
            op_point(r, &[&[2, 3, 2, 2]], |t, v| {
                let y = t.log_softmax_channel(v[0])?;
                weighted_sum(t, y)
            })
        }),
        op("log1m_softmax_channel", |r| {
            op_point(r, &[&[2, 3, 2, 2]], |t, v| {
                let y = t.log1m_softmax_channel(v[0], 2)?;
                weighted_sum(t, y)
            })
        }),
        op("gather_channel", |r| {
            op_point(r, &[&[2, 3, 2, 2]], |t, v| {
                let y = t.gather_channel(v[0], &[0, 1, 2, 1, 2, 2, 0, 1])?;
                weighted_sum(t, y)
            })
        }),
        op("select_channel", |r| {
            op_point(r, &[&[2, 3, 2, 2]], |t, v| {
                let y = t.select_channel(v[0], 1)?;
                weighted_sum(t, y)
            })
        }),
        op("conv2d", |r| {
            op_point(r, &[&[2, 2, 5, 5], &[3, 2, 4, 4], &[3], &[2, 2, 3, 3]], |t, v| {
                let a = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let b = t.conv2d(v[0], v[3], None, 1, 1)?;
                let a = weighted_sum(t, a)?;
                let b = weighted_sum(t, b)?;
                t.add(a, b)
            })
        }),
        op("upsample_bilinear", |r| {
            op_point(r, &[&[1, 2, 3, 2]], |t, v| {
                let y = t.upsample_bilinear(v[0], 7, 5)?;
                weighted_sum(t, y)
            })
        }),
        op("global_avg_pool", |r| {
            op_point(r, &[&[2, 3, 3, 2]], |t, v| {
                let y = t.global_avg_pool(v[0])?;
                weighted_sum(t, y)
            })
        }),
        op("concat_channels", |r| {
            op_point(r, &[&[2, 1, 2, 2], &[2, 2, 2, 2]], |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }),
        op("berhu", |r| op_point(r, &[&[1, 1, 3, 3], &[1, 1, 3, 3]], |t, v| t.berhu(v[0], v[1]))),
        op("spectral_normalize", |r| {
            let w = randn(&[3, 2, 2, 2], r)?;
            let state = SpectralState::for_weight(&w, r);
            check(
                |t, v| {
                    let mut st = state.clone();
                    let y = spectral_normalize(t, v[0], &mut st, 0)?;
                    weighted_sum(t, y)
                },
                &[w],
            )
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    fn loss(name: &'static str, check: PointCheck) -> Case {
        Case { name, kind: CaseKind::Loss, checks: vec![check; OP_POINTS] }
    }
    fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..classes)).collect()
    }
    fn disc(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
        let z = randn(&[2, 3, 2, 2], rng)?;
        check(|t, v| f(t, v[0]).map_err(lift), &[z])
    }
    vec![
        loss("seg_ce_loss", |r| {
            let z = randn(&[2, 4, 2, 3], r)?;
            let y = labels(r, 12, 4);
            check(|t, v| seg_ce_loss(t, v[0], &y).map_err(lift), &[z])
        }),
        loss("berhu_loss", |r| {
            let pred = randn(&[2, 1, 3, 3], r)?;
            let gt = Tensor::sample(&[2, 1, 3, 3], &Uniform::new(0.0, 1.0).expect("unit interval"), r)?;
            check(
                |t, v| {
                    let g = t.constant(gt.clone());
                    berhu_loss(t, v[0], g).map_err(lift)
                },
                &[pred],
            )
        }),
        loss("disc_ce_loss", |r| disc(r, |t, z| disc_ce_loss(t, z, 1, Reduction::Mean))),
        loss("disc_ce_loss_spatial_sum", |r| disc(r, |t, z| disc_ce_loss(t, z, 2, Reduction::SpatialSum))),
        loss("intra_adv_loss", |r| disc(r, |t, z| intra_adv_loss(t, z, Reduction::Mean))),
        loss("inter_adv_loss_m1", |r| {
            disc(r, |t, z| inter_adv_loss(t, z, AlignmentMode::M1, InterClasses::PAIR, Reduction::Mean))
        }),
        loss("inter_adv_loss_m2", |r| {
            disc(r, |t, z| inter_adv_loss(t, z, AlignmentMode::M2, InterClasses::PAIR, Reduction::Mean))
        }),
        loss("inter_adv_loss_m3", |r| {
            disc(r, |t, z| inter_adv_loss(t, z, AlignmentMode::M3, InterClasses::PAIR, Reduction::Mean))
        }),
    ]
}

/// Network widths for a composite check at a given image size.
///
/// At 4x4 the discriminator has one hidden layer, the deepest ladder that
/// accepts that input; at 32x32 it has the full four hidden layers.
fn composite_nets(size: usize) -> (GeneratorConfig, DiscriminatorConfig) {
    let g = GeneratorConfig { encoder_channels: vec![3, 3, 3], decoder_channels: 3, ..Default::default() };
    let channels = if size >= 32 { vec![2, 2, 2, 2] } else { vec![2] };
    // u stays fixed so the normalized weight is a deterministic function of W
    (g, DiscriminatorConfig { channels, power_iters: 0 })
}

/// Perturbs zero-initialized biases so their gradients are generic.
fn jitter(point: &mut [Tensor], rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    for t in point {
        for v in t.data_mut() {
            *v += rng.sample(noise);
        }
    }
}

/// Two batches of `n` images: dataset 1 labels segmentation, dataset 2 labels depth.
struct CompositeData {
    images: [Tensor; 2],
    seg: Vec<usize>,
    inv_depth: Tensor,
    classes: usize,
    size: usize,
    n: usize,
}

fn composite_data(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> Result<CompositeData> {
    let n = 2;
    let unit = Uniform::new(0.0, 1.0).expect("unit interval");
    let img = |rng: &mut ChaCha8Rng| Tensor::sample(&[n, 3, size, size], &unit, rng);
    let images = [img(rng)?, img(rng)?];
    let seg = (0..n * size * size).map(|_| rng.random_range(0..classes)).collect();
    // a quarter of the pixels are sky (zero inverse depth)
    let depth = (0..n * size * size).map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.sample(unit) }).collect();
    let inv_depth = Tensor::new(&[n, 1, size, size], depth)?;
    Ok(CompositeData { images, seg, inv_depth, classes, size, n })
}

/// Weights that keep every term visible at the composite tolerance; the
/// default adversarial weights would hide a wrong gradient below it.
const CHECK_WEIGHTS: LossWeights = LossWeights { w_seg: 1.0, w_depth: 1.0, lambda_intra: 0.5, lambda_inter: 0.5 };

fn generator_composite(rng: &mut ChaCha8Rng, size: usize, mode: AlignmentMode) -> Result<f64> {
    let (gcfg, dcfg) = composite_nets(size);
    let gen = GeneratorNet::build(&gcfg, rng)?;
    let d_seg = DiscriminatorNet::build(Task::Seg, gcfg.num_classes, 2, &dcfg, rng)?;
    let d_depth = DiscriminatorNet::build(Task::Depth, 1, 2, &dcfg, rng)?;
    let data = composite_data(rng, size, gcfg.num_classes)?;
    let mut point: Vec<Tensor> = gen.store().params().iter().map(|p| p.value.clone()).collect();
    jitter(&mut point, rng);

    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut ds = d_seg.clone();
        let mut dd = d_depth.clone();
        let sv = ds.store().bind_constant(tape);
        let dv = dd.store().bind_constant(tape);
        let mut parts = Vec::new();
        for (k, images) in data.images.iter().enumerate() {
            let x = tape.constant(images.clone());
            let out = gen.forward(tape, vars, x, &Task::ALL)?;
            let logits = out.seg_logits.expect("seg requested");
            let depth = out.inv_depth.expect("depth requested");
            let probs = tape.softmax_channel(logits)?;
            let seg_logits_d = ds.forward(tape, &sv, probs)?;
            let depth_logits_d = dd.forward(tape, &dv, depth)?;
            let terms = if k == 0 {
                let sup = seg_ce_loss(tape, logits, &data.seg)?;
                let intra = intra_adv_loss(tape, seg_logits_d, Reduction::Mean)?;
                let classes = InterClasses { labeled: 2, unlabeled: 1 };
                let inter = inter_adv_loss(tape, depth_logits_d, mode, classes, Reduction::Mean)?;
                [
                    TaskTerms { task: Task::Seg, supervised: Some(sup), intra: Some(intra), inter: None },
                    TaskTerms { task: Task::Depth, supervised: None, intra: None, inter: Some(inter) },
                ]
            } else {
                let y = tape.constant(data.inv_depth.clone());
                let sup = berhu_loss(tape, depth, y)?;
                let intra = intra_adv_loss(tape, depth_logits_d, Reduction::SpatialSum)?;
                let inter = inter_adv_loss(tape, seg_logits_d, mode, InterClasses::PAIR, Reduction::SpatialSum)?;
                [
                    TaskTerms { task: Task::Seg, supervised: None, intra: None, inter: Some(inter) },
                    TaskTerms { task: Task::Depth, supervised: Some(sup), intra: Some(intra), inter: None },
                ]
            };
            parts.push(generator_objective(tape, &terms, &CHECK_WEIGHTS)?);
        }
        Ok(tape.add_all(&parts)?)
    };
    check(|t, v| build(t, v).map_err(lift), &point)
}

fn discriminator_composite(rng: &mut ChaCha8Rng, size: usize) -> Result<f64> {
    let (gcfg, dcfg) = composite_nets(size);
    let gen = GeneratorNet::build(&gcfg, rng)?;
    let d_seg = DiscriminatorNet::build(Task::Seg, gcfg.num_classes, 2, &dcfg, rng)?;
    let d_depth = DiscriminatorNet::build(Task::Depth, 1, 2, &dcfg, rng)?;
    let data = composite_data(rng, size, gcfg.num_classes)?;
    let preds = data.images.iter().map(|x| gen.predict(x)).collect::<Result<Vec<_>>>()?;
    let seg_gt = one_hot(&data.seg, data.n, data.classes, data.size, data.size)?;
    let n_seg = d_seg.store().len();
    let mut point: Vec<Tensor> =
        d_seg.store().params().iter().chain(d_depth.store().params()).map(|p| p.value.clone()).collect();
    jitter(&mut point, rng);

    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut ds = d_seg.clone();
        let mut dd = d_depth.clone();
        let seg_gt = tape.constant(seg_gt.clone());
        let seg_preds = preds
            .iter()
            .enumerate()
            .map(|(k, (logits, _))| {
                let z = tape.constant(logits.clone());
                Ok((k + 1, tape.softmax_channel(z)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let a = discriminator_objective(tape, &mut ds, &vars[..n_seg], &[seg_gt], &seg_preds, Reduction::Mean)?;
        let depth_gt = tape.constant(data.inv_depth.clone());
        let depth_preds: Vec<(usize, Var)> =
            preds.iter().enumerate().map(|(k, (_, d))| (k + 1, tape.constant(d.clone()))).collect();
        let b =
            discriminator_objective(tape, &mut dd, &vars[n_seg..], &[depth_gt], &depth_preds, Reduction::SpatialSum)?;
        Ok(tape.add(a, b)?)
    };
    check(|t, v| build(t, v).map_err(lift), &point)
}

fn composite_cases() -> Vec<Case> {
    fn composite(name: &'static str, small: PointCheck, full: PointCheck) -> Case {
        Case { name, kind: CaseKind::Composite, checks: vec![small, small, full] }
    }
    vec![
        composite(
            "generator_objective_m1",
            |r| generator_composite(r, 4, AlignmentMode::M1),
            |r| generator_composite(r, 32, AlignmentMode::M1),
        ),
        composite(
            "generator_objective_m2",
            |r| generator_composite(r, 4, AlignmentMode::M2),
            |r| generator_composite(r, 32, AlignmentMode::M2),
        ),
        composite(
            "generator_objective_m3",
            |r| generator_composite(r, 4, AlignmentMode::M3),
            |r| generator_composite(r, 32, AlignmentMode::M3),
        ),
        composite("discriminator_objective", |r| discriminator_composite(r, 4), |r| discriminator_composite(r, 32)),
    ]
}

fn all_cases() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases.extend(composite_cases());
    cases
}

/// Every case name, in suite order.
pub fn case_names() -> Vec<&'static str> {
    all_cases().iter().map(|c| c.name).collect()
}

fn run(case: &Case, seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for f in &case.checks {
        worst = worst.max(f(&mut rng)?);
    }
    let tolerance = if case.kind == CaseKind::Composite { COMPOSITE_TOLERANCE } else { OP_TOLERANCE };
    Ok(CaseResult {
        name: case.name.to_string(),
        kind: case.kind,
        points: case.checks.len(),
        max_error: worst,
        tolerance,
    })
}

/// Runs one named case.
pub fn run_case(name: &str, seed: u64) -> Result<CaseResult> {
    let case = all_cases()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::config(format!("unknown gradcheck case {name:?}; known: {}", case_names().join(", "))))?;
    run(&case, seed)
}

/// Runs every case.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    all_cases().iter().map(|c| run(c, seed)).collect()
}
