//! SGD with momentum, Adam, and the polynomial learning-rate schedule.
//!
//! Both optimizers walk the parameters in a fixed order and keep one buffer
//! slot per position. A parameter is skipped (no decay, no momentum) when it is
//! frozen or has no gradient buffer this step.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Momentum buffers; `None` until a parameter's first update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<Option<Vec<f64>>>,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
    /// Per-parameter update counts used for bias correction.
    pub t: Vec<u64>,
    pub steps: u64,
}

fn check_len(op: &'static str, theta: &[f64], g: &[f64]) -> Result<()> {
    if theta.len() != g.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("parameter of length {} with gradient of length {}", theta.len(), g.len()),
        });
    }
    Ok(())
}

/// One SGD update of a flat parameter: `v ← μv + (g + λθ)`, `θ ← θ − lr·v`.
pub fn sgd_update(
    theta: &mut [f64],
    g: &[f64],
    velocity: &mut Option<Vec<f64>>,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    check_len("sgd_step", theta, g)?;
    let v = velocity.get_or_insert_with(|| vec![0.0; theta.len()]);
    check_len("sgd_step", theta, v)?;
    for ((p, gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
        let d = gi + cfg.weight_decay * *p;
        *vi = cfg.momentum * *vi + d;
        *p -= lr * *vi;
    }
    Ok(())
}

/// One bias-corrected Adam update of a flat parameter; `t` is incremented first.
pub fn adam_update(
    theta: &mut [f64],
    g: &[f64],
    m: &mut Option<Vec<f64>>,
    v: &mut Option<Vec<f64>>,
    t: &mut u64,
    cfg: &AdamConfig,
) -> Result<()> {
    check_len("adam_step", theta, g)?;
    let m = m.get_or_insert_with(|| vec![0.0; theta.len()]);
    let v = v.get_or_insert_with(|| vec![0.0; theta.len()]);
    check_len("adam_step", theta, m)?;
    check_len("adam_step", theta, v)?;
    *t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
    for i in 0..theta.len() {
        let gi = g[i] + cfg.weight_decay * theta[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

fn eligible(p: &Tensor) -> bool {
    p.requires_grad() && p.grad().is_some()
}

impl SgdState {
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        lr: f64,
        cfg: &SgdConfig,
    ) -> Result<()> {
        for (i, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.resize(i + 1, None);
            }
            if !eligible(p) {
                continue;
            }
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
            sgd_update(p.data_mut(), &g, &mut self.velocity[i], lr, cfg)?;
        }
        self.steps += 1;
        Ok(())
    }
}

impl AdamState {
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (i, p) in params.into_iter().enumerate() {
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
                self.t.resize(i + 1, 0);
            }
            if !eligible(p) {
                continue;
            }
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
            adam_update(p.data_mut(), &g, &mut self.m[i], &mut self.v[i], &mut self.t[i], cfg)?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(TensorError::invalid(format!(
            "poly_lr needs 0 <= iter <= max_iter with max_iter > 0, got {iter}/{max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(momentum: f64, weight_decay: f64) -> SgdConfig {
        SgdConfig { lr: 0.1, momentum, weight_decay }
    }

    #[test]
    fn sgd_examples() {
        let mut theta = [1.0];
        let mut v = None;
        sgd_update(&mut theta, &[0.5], &mut v, 0.1, &plain(0.0, 0.0)).unwrap();
        assert!((theta[0] - 0.95).abs() < 1e-15);

        let mut theta = [1.0];
        let mut v = None;
        let cfg = plain(0.9, 0.0);
        sgd_update(&mut theta, &[1.0], &mut v, 0.1, &cfg).unwrap();
        assert_eq!(v.as_ref().unwrap()[0], 1.0);
        assert!((theta[0] - 0.9).abs() < 1e-15);
        sgd_update(&mut theta, &[1.0], &mut v, 0.1, &cfg).unwrap();
        assert!((v.as_ref().unwrap()[0] - 1.9).abs() < 1e-15);
        assert!((theta[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut theta = [0.3, -1.7, 2.5];
        let before = theta;
        let mut v = None;
        sgd_update(&mut theta, &[1.0, 2.0, 3.0], &mut v, 0.0, &SgdConfig::default()).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut theta = [1.0, 2.0];
        assert!(sgd_update(&mut theta, &[1.0], &mut None, 0.1, &SgdConfig::default()).is_err());
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut theta = [0.5, -0.25];
        let (mut m, mut v, mut t) = (None, None, 0);
        adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, &mut t, &AdamConfig::default()).unwrap();
        assert_eq!(theta, [0.5, -0.25]);
        assert_eq!(t, 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.5, -3.0, 100.0] {
            let mut theta = [0.0];
            let (mut m, mut v, mut t) = (None, None, 0);
            adam_update(&mut theta, &[g], &mut m, &mut v, &mut t, &cfg).unwrap();
            let expect = cfg.lr * g.abs() / (g.abs() + cfg.eps);
            assert!((theta[0].abs() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let cfg = AdamConfig::default();
        let g = 0.5;
        let mut theta = [1.0];
        let (mut m, mut v, mut t) = (None, None, 0);
        adam_update(&mut theta, &[g], &mut m, &mut v, &mut t, &cfg).unwrap();
        adam_update(&mut theta, &[g], &mut m, &mut v, &mut t, &cfg).unwrap();
        // m1 = 0.05, v1 = 0.0025; m2 = 0.095, v2 = 0.004975
        let m2: f64 = 0.9 * 0.05 + 0.1 * 0.5;
        let v2: f64 = 0.99 * 0.0025 + 0.01 * 0.25;
        assert!((m.as_ref().unwrap()[0] - m2).abs() < 1e-15);
        assert!((v.as_ref().unwrap()[0] - v2).abs() < 1e-15);
        let step1 = 1e-4 * 0.5 / (0.5 + 1e-8);
        let step2 = 1e-4 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9801)).sqrt() + 1e-8);
        assert!((theta[0] - (1.0 - step1 - step2)).abs() < 1e-12);
    }

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 0.01, 0.9).unwrap() - 5.3589e-3).abs() < 1e-7);
        assert!(poly_lr(101, 100, 0.01, 0.9).is_err());
    }

    #[test]
    fn frozen_and_gradless_params_are_skipped() {
        let mut a = Tensor::full(&[2], 1.0).unwrap().with_requires_grad(true);
        let mut b = Tensor::full(&[2], 1.0).unwrap().with_requires_grad(false);
        let mut c = Tensor::full(&[2], 1.0).unwrap().with_requires_grad(true);
        a.accumulate_grad(&[1.0, 1.0]).unwrap();
        b.accumulate_grad(&[1.0, 1.0]).unwrap();
        let mut st = SgdState::default();
        st.step([&mut a, &mut b, &mut c], 0.1, &SgdConfig::default()).unwrap();
        assert!(a.data()[0] < 1.0);
        assert_eq!(b.data(), &[1.0, 1.0]);
        assert_eq!(c.data(), &[1.0, 1.0]);
        assert!(st.velocity[1].is_none() && st.velocity[2].is_none());
        assert_eq!(st.steps, 1);
    }
}
