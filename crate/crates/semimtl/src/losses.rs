//! Supervised, adversarial and composite objectives.
//!
//! Adversarial terms take discriminator logits (`N x (K+1) x H x W`) rather
//! than a network, so they can be evaluated on any logit map. Domain class 0
//! is ground truth; class k >= 1 is a prediction from dataset k.

use serde::{Deserialize, Serialize};
use synscene::Task;
use tensorcore::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nets::DiscriminatorNet;

/// Domain class reserved for ground-truth maps.
pub const GT_CLASS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_seg: f64,
    pub w_depth: f64,
    pub lambda_intra: f64,
    pub lambda_inter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_seg: 1.0, w_depth: 0.01, lambda_intra: 0.001, lambda_inter: 0.0001 }
    }
}

impl LossWeights {
    pub fn task(&self, task: Task) -> f64 {
        match task {
            Task::Seg => self.w_seg,
            Task::Depth => self.w_depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_seg, self.w_depth, self.lambda_intra, self.lambda_inter];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Target used for the unlabeled dataset's predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignmentMode {
    /// Toward the labeled dataset's prediction class.
    M1,
    /// Toward the ground-truth class.
    M2,
    /// Away from the unlabeled dataset's own class.
    M3,
}

/// Spatial reduction of the discriminator-side terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over batch and pixels.
    #[default]
    Mean,
    /// Sum over pixels, mean over batch.
    SpatialSum,
}

fn reduce(tape: &mut Tape, per_pixel: Var, reduction: Reduction) -> Result<Var> {
    let m = tape.mean(per_pixel)?;
    match reduction {
        Reduction::Mean => Ok(m),
        Reduction::SpatialSum => {
            let (_, _, h, w) = tape.value(per_pixel).dims4()?;
            Ok(tape.scale(m, (h * w) as f64)?)
        }
    }
}

/// Mean pixel cross-entropy; `labels` is `N x H x W`.
pub fn seg_ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax_channel(logits)?;
    let picked = tape.gather_channel(logp, labels)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Mean BerHu penalty on inverse depth.
pub fn berhu_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    Ok(tape.berhu(pred, gt)?)
}

/// `Σ_t w_t · L_t` over the given task losses; `None` when empty.
pub fn mtl_loss(tape: &mut Tape, task_losses: &[(Task, Var)], w: &LossWeights) -> Result<Option<Var>> {
    let terms = task_losses.iter().map(|&(t, l)| weighted(tape, l, w.task(t))).collect::<Result<Vec<_>>>()?;
    sum_terms(tape, &terms)
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        Ok(None)
    } else {
        Ok(Some(tape.add_all(terms)?))
    }
}

/// `-reduce(log softmax(logits)[c])`.
pub fn disc_ce_loss(tape: &mut Tape, logits: Var, c: usize, reduction: Reduction) -> Result<Var> {
    let (_, k1, _, _) = tape.try_value(logits)?.dims4()?;
    if c >= k1 {
        return Err(Error::config(format!("domain label {c} out of range for {k1} classes")));
    }
    let logp = tape.log_softmax_channel(logits)?;
    let picked = tape.select_channel(logp, c)?;
    let r = reduce(tape, picked, reduction)?;
    Ok(tape.scale(r, -1.0)?)
}

/// Pulls the labeled dataset's predictions toward the ground-truth class.
pub fn intra_adv_loss(tape: &mut Tape, logits: Var, reduction: Reduction) -> Result<Var> {
    disc_ce_loss(tape, logits, GT_CLASS, reduction)
}

/// Domain classes involved in an inter-domain term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterClasses {
    /// Class of the dataset that labels the task (M1 target).
    pub labeled: usize,
    /// Class of the dataset the prediction came from (M3 avoids it).
    pub unlabeled: usize,
}

impl InterClasses {
    /// Two-dataset layout: dataset 1 labels the task, dataset 2 does not.
    pub const PAIR: InterClasses = InterClasses { labeled: 1, unlabeled: 2 };
}

/// Adversarial term on predictions from a dataset that does not label the task.
pub fn inter_adv_loss(
    tape: &mut Tape,
    logits: Var,
    mode: AlignmentMode,
    classes: InterClasses,
    reduction: Reduction,
) -> Result<Var> {
    match mode {
        AlignmentMode::M1 => disc_ce_loss(tape, logits, classes.labeled, reduction),
        AlignmentMode::M2 => disc_ce_loss(tape, logits, GT_CLASS, reduction),
        AlignmentMode::M3 => {
            let (_, k1, _, _) = tape.try_value(logits)?.dims4()?;
            if classes.unlabeled >= k1 {
                return Err(Error::config(format!("domain label {} out of range for {k1} classes", classes.unlabeled)));
            }
            let l = tape.log1m_softmax_channel(logits, classes.unlabeled)?;
            let r = reduce(tape, l, reduction)?;
            Ok(tape.scale(r, -1.0)?)
        }
    }
}

/// `w·v`, or a constant zero when `w == 0` so that the term attaches no zero
/// gradient to parameters it alone reaches (which would otherwise still
/// receive momentum and weight decay).
fn weighted(tape: &mut Tape, v: Var, w: f64) -> Result<Var> {
    if w == 0.0 {
        Ok(tape.constant(Tensor::scalar(0.0)))
    } else {
        Ok(tape.scale(v, w)?)
    }
}

/// `λ_intra·intra + λ_inter·inter` over the present terms; `None` when both absent.
pub fn semi_loss(tape: &mut Tape, intra: Option<Var>, inter: Option<Var>, w: &LossWeights) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if let Some(v) = intra {
        terms.push(weighted(tape, v, w.lambda_intra)?);
    }
    if let Some(v) = inter {
        terms.push(weighted(tape, v, w.lambda_inter)?);
    }
    sum_terms(tape, &terms)
}

/// Loss components of one task on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskTerms {
    pub task: Task,
    /// Present when the batch labels the task.
    pub supervised: Option<Var>,
    pub intra: Option<Var>,
    /// Present when the batch does not label the task.
    pub inter: Option<Var>,
}

/// `Σ_t (w_t·L_gt^t + λ_intra·L_intra^t + λ_inter·L_inter^t)` over present terms.
pub fn generator_objective(tape: &mut Tape, terms: &[TaskTerms], w: &LossWeights) -> Result<Var> {
    let mut parts = Vec::new();
    for t in terms {
        if let Some(l) = t.supervised {
            parts.push(weighted(tape, l, w.task(t.task))?);
        }
        if let Some(s) = semi_loss(tape, t.intra, t.inter, w)? {
            parts.push(s);
        }
    }
    sum_terms(tape, &parts)?.ok_or_else(|| Error::config("generator objective has no terms"))
}

/// `Σ_gt CE(D(y), 0) + Σ_(k, ŷ) CE(D(ŷ), k)`.
///
/// Every input map must be detached (no gradient path back to a generator).
pub fn discriminator_objective(
    tape: &mut Tape,
    d: &mut DiscriminatorNet,
    d_vars: &[Var],
    gt_maps: &[Var],
    pred_maps: &[(usize, Var)],
    reduction: Reduction,
) -> Result<Var> {
    let mut terms = Vec::new();
    for &m in gt_maps.iter().chain(pred_maps.iter().map(|(_, m)| m)) {
        if tape.needs_grad(m) {
            return Err(Error::config("discriminator inputs must be detached from the generator"));
        }
    }
    for &y in gt_maps {
        let logits = d.forward(tape, d_vars, y)?;
        terms.push(disc_ce_loss(tape, logits, GT_CLASS, reduction)?);
    }
    for &(k, y) in pred_maps {
        if k == GT_CLASS {
            return Err(Error::config("domain class 0 is reserved for ground truth"));
        }
        let logits = d.forward(tape, d_vars, y)?;
        terms.push(disc_ce_loss(tape, logits, k, reduction)?);
    }
    sum_terms(tape, &terms)?.ok_or_else(|| Error::config("discriminator objective has no terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensorcore::Tensor;

    fn logits(tape: &mut Tape, probs: &[f64]) -> Var {
        let data = probs.iter().map(|p| p.ln()).collect();
        tape.constant(Tensor::new(&[1, probs.len(), 1, 1], data).unwrap())
    }

    fn val(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn seg_ce_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        let l = seg_ce_loss(&mut tape, z, &[0, 1, 2, 0]).unwrap();
        assert!((val(&tape, l) - 3f64.ln()).abs() < 1e-15);

        // two pixels, C = 2, true-class probabilities 0.5 and 0.8
        let data = vec![0.5f64.ln(), 0.2f64.ln(), 0.5f64.ln(), 0.8f64.ln()];
        let x = tape.constant(Tensor::new(&[1, 2, 1, 2], data).unwrap());
        let l = seg_ce_loss(&mut tape, x, &[0, 1]).unwrap();
        let expect = -(0.5f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((val(&tape, l) - expect).abs() < 1e-15);
        assert!((val(&tape, l) - 0.4581).abs() < 1e-4);

        assert!(seg_ce_loss(&mut tape, x, &[0, 2]).is_err());
    }

    #[test]
    fn berhu_example() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[2], vec![0.1, 1.0]).unwrap());
        let g = tape.constant(Tensor::zeros(&[2]).unwrap());
        let l = berhu_loss(&mut tape, p, g).unwrap();
        assert!((val(&tape, l) - 1.35).abs() < 1e-12);
    }

    #[test]
    fn mtl_examples() {
        let mut tape = Tape::new();
        let w = LossWeights::default();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(2.0));
        let l = mtl_loss(&mut tape, &[(Task::Seg, a), (Task::Depth, b)], &w).unwrap().unwrap();
        assert!((val(&tape, l) - 1.02).abs() < 1e-15);
        let l = mtl_loss(&mut tape, &[(Task::Depth, b)], &w).unwrap().unwrap();
        assert_eq!(val(&tape, l), 0.02);
        assert!(mtl_loss(&mut tape, &[], &w).unwrap().is_none());
    }

    #[test]
    fn disc_ce_examples() {
        let mut tape = Tape::new();
        let x = logits(&mut tape, &[0.7, 0.2, 0.1]);
        let l = disc_ce_loss(&mut tape, x, 1, Reduction::Mean).unwrap();
        assert!((val(&tape, l) - 0.2f64.ln().abs()).abs() < 1e-12);
        assert!(disc_ce_loss(&mut tape, x, 3, Reduction::Mean).is_err());
        let u = tape.constant(Tensor::zeros(&[2, 3, 2, 2]).unwrap());
        let l = disc_ce_loss(&mut tape, u, 2, Reduction::Mean).unwrap();
        assert!((val(&tape, l) - 3f64.ln()).abs() < 1e-15);
        let l = disc_ce_loss(&mut tape, u, 2, Reduction::SpatialSum).unwrap();
        assert!((val(&tape, l) - 4.0 * 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn inter_examples() {
        let mut tape = Tape::new();
        let r = Reduction::Mean;
        let half = logits(&mut tape, &[0.25, 0.25, 0.5]);
        let l = inter_adv_loss(&mut tape, half, AlignmentMode::M3, InterClasses::PAIR, r).unwrap();
        assert!((val(&tape, l) - 2f64.ln()).abs() < 1e-15);
        let zero = tape.constant(Tensor::new(&[1, 3, 1, 1], vec![0.0, 0.0, -1e6]).unwrap());
        let l = inter_adv_loss(&mut tape, zero, AlignmentMode::M3, InterClasses::PAIR, r).unwrap();
        assert!(val(&tape, l).abs() < 1e-15);
        let u = tape.constant(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        let l = inter_adv_loss(&mut tape, u, AlignmentMode::M1, InterClasses::PAIR, r).unwrap();
        assert!((val(&tape, l) - 3f64.ln()).abs() < 1e-15);
        let sure = tape.constant(Tensor::new(&[1, 3, 1, 1], vec![-1e6, -1e6, 0.0]).unwrap());
        let l = inter_adv_loss(&mut tape, sure, AlignmentMode::M3, InterClasses::PAIR, r).unwrap();
        assert!(val(&tape, l).is_finite());
    }

    #[test]
    fn semi_examples() {
        let mut tape = Tape::new();
        let w = LossWeights::default();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(10.0));
        let l = semi_loss(&mut tape, Some(a), Some(b), &w).unwrap().unwrap();
        assert!((val(&tape, l) - 0.003).abs() < 1e-15);
        let l = semi_loss(&mut tape, Some(a), None, &w).unwrap().unwrap();
        assert_eq!(val(&tape, l), 0.002);
        let zero = LossWeights { lambda_intra: 0.0, lambda_inter: 0.0, ..w };
        let l = semi_loss(&mut tape, Some(a), Some(b), &zero).unwrap().unwrap();
        assert_eq!(val(&tape, l), 0.0);
    }

    #[test]
    fn generator_objective_hand_sum() {
        let mut tape = Tape::new();
        let w = LossWeights::default();
        let c = |tape: &mut Tape, v: f64| tape.constant(Tensor::scalar(v));
        let (sup, intra, inter) = (c(&mut tape, 0.8), c(&mut tape, 1.5), c(&mut tape, 0.9));
        let terms = [
            TaskTerms { task: Task::Seg, supervised: Some(sup), intra: Some(intra), inter: None },
            TaskTerms { task: Task::Depth, supervised: None, intra: None, inter: Some(inter) },
        ];
        let l = generator_objective(&mut tape, &terms, &w).unwrap();
        let expect = 1.0 * 0.8 + 0.001 * 1.5 + 0.0001 * 0.9;
        assert!((val(&tape, l) - expect).abs() < 1e-15);
        assert!(generator_objective(&mut tape, &[], &w).is_err());
    }
}
