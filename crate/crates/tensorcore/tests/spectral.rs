use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use tensorcore::{spectral_normalize_tensor, SpectralState, Tensor};

/// Top singular value via power iteration on `WᵀW`, started from the all-ones
/// vector and run far past convergence.
fn top_singular_value(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let d = w.data();
    let mut gram = vec![0.0; cols * cols];
    for r in 0..rows {
        for i in 0..cols {
            for j in 0..cols {
                gram[i * cols + j] += d[r * cols + i] * d[r * cols + j];
            }
        }
    }
    let mut x = vec![1.0; cols];
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let y: Vec<f64> = (0..cols).map(|i| (0..cols).map(|j| gram[i * cols + j] * x[j]).sum()).collect();
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        lambda = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / x.iter().map(|v| v * v).sum::<f64>();
        x = y.iter().map(|v| v / n).collect();
    }
    lambda.sqrt()
}

#[test]
fn random_4x4_normalizes_to_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w = Tensor::sample(&[4, 4], &Normal::new(0.0, 1.0).unwrap(), &mut rng).unwrap();
    let mut st = SpectralState::new(4, &mut rng);
    let (out, sigma) = spectral_normalize_tensor(&w, &mut st, 20).unwrap();
    let reference = top_singular_value(&w);
    assert!((sigma - reference).abs() / reference < 1e-2);
    assert!((top_singular_value(&out) - 1.0).abs() < 1e-2);
}

#[test]
fn random_matrices_up_to_32_stay_in_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for (rows, cols) in [(2, 3), (8, 8), (16, 5), (32, 32), (5, 32), (32, 17)] {
        let w = Tensor::sample(&[rows, cols], &normal, &mut rng).unwrap();
        let mut st = SpectralState::new(rows, &mut rng);
        let (out, _) = spectral_normalize_tensor(&w, &mut st, 20).unwrap();
        let top = top_singular_value(&out);
        assert!((0.98..=1.02).contains(&top), "{rows}x{cols}: {top}");
        let unit = st.u.iter().map(|v| v * v).sum::<f64>();
        assert!((unit - 1.0).abs() < 1e-9);
    }
}

#[test]
fn conv_kernel_is_flattened_per_output_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::sample(&[6, 2, 4, 4], &Normal::new(0.0, 0.3).unwrap(), &mut rng).unwrap();
    let mut st = SpectralState::for_weight(&w, &mut rng);
    assert_eq!(st.u.len(), 6);
    let (out, _) = spectral_normalize_tensor(&w, &mut st, 30).unwrap();
    assert_eq!(out.shape(), w.shape());
    let flat = out.reshape(&[6, 32]).unwrap();
    assert!((top_singular_value(&flat) - 1.0).abs() < 1e-2);
}
