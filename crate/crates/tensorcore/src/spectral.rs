//! Spectral normalization by power iteration.
//!
//! A weight of shape `out x ...` is viewed as an `out x in` matrix. Each call
//! refines the persistent left singular vector `u`, derives `v = Wᵀu / |Wᵀu|`
//! and divides the weight by `σ = uᵀ W v`. Since `v` is recomputed from the
//! current weight, `σ = |Wᵀu|` and `∂σ/∂W = u vᵀ` holds exactly for fixed `u`,
//! which is what the backward rule uses.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower bound on the singular-value estimate.
pub const SIGMA_EPS: f64 = 1e-12;

/// Persistent left singular-vector estimate for one weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    /// Total power iterations performed so far.
    pub iterations: u64,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.numel() / rows)
}

impl SpectralState {
    /// Random unit vector of length `rows`.
    pub fn new<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut u) == 0.0 {
            u[0] = 1.0;
        }
        Self { u, iterations: 0 }
    }

    pub fn for_weight<R: Rng + ?Sized>(w: &Tensor, rng: &mut R) -> Self {
        Self::new(w.shape()[0], rng)
    }
}

fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out.iter_mut().zip(row).for_each(|(o, x)| *o += u[r] * x);
    }
    out
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Runs `iters` power iterations on `state`, then returns `(v, sigma, clamped)`.
fn estimate(w: &Tensor, state: &mut SpectralState, iters: usize) -> Result<(Vec<f64>, f64, bool)> {
    if w.rank() < 2 {
        return Err(TensorError::invalid(format!(
            "spectral normalization needs a matrix or kernel, got shape {:?}",
            w.shape()
        )));
    }
    let (rows, cols) = matrix_dims(w);
    if state.u.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "spectral_normalize",
            detail: format!("u has length {} for a {rows}x{cols} matrix", state.u.len()),
        });
    }
    let wv = w.data();
    for _ in 0..iters {
        let mut v = mat_t_vec(wv, rows, cols, &state.u);
        normalize(&mut v);
        let mut u = mat_vec(wv, rows, cols, &v);
        if normalize(&mut u) > 0.0 {
            state.u = u;
        }
        state.iterations += 1;
    }
    let mut v = mat_t_vec(wv, rows, cols, &state.u);
    let norm = normalize(&mut v);
    let sigma: f64 = mat_vec(wv, rows, cols, &v).iter().zip(&state.u).map(|(a, b)| a * b).sum();
    debug_assert!((sigma - norm).abs() <= 1e-9 * norm.max(1.0));
    if sigma < SIGMA_EPS {
        Ok((v, SIGMA_EPS, true))
    } else {
        Ok((v, sigma, false))
    }
}

/// Records `W / σ̂` on the tape, updating `state.u` in place.
pub fn spectral_normalize(tape: &mut Tape, w: Var, state: &mut SpectralState, n_power_iters: usize) -> Result<Var> {
    let (v, sigma, clamped) = estimate(tape.try_value(w)?, state, n_power_iters)?;
    tape.spectral_div(w, state.u.clone(), v, sigma, clamped)
}

/// Tape-free variant returning the normalized weight and `σ̂`.
pub fn spectral_normalize_tensor(w: &Tensor, state: &mut SpectralState, n_power_iters: usize) -> Result<(Tensor, f64)> {
    let (_, sigma, _) = estimate(w, state, n_power_iters)?;
    let data = w.data().iter().map(|x| x / sigma).collect();
    Ok((Tensor::new(w.shape(), data)?, sigma))
}
