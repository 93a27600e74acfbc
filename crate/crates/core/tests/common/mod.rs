#![allow(dead_code)]

use lowrank::linalg::Mat;
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
    Mat::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

/// `m x n` with orthonormal columns (`m >= n`).
pub fn orthonormal(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Mat {
    gaussian(rng, m, n).qr().q()
}

/// `q1 * diag(sigma) * q2^T` with known singular values.
pub fn with_spectrum(rng: &mut ChaCha8Rng, m: usize, n: usize, sigma: &[f64]) -> Mat {
    let r = sigma.len();
    let q1 = orthonormal(rng, m, r);
    let q2 = orthonormal(rng, n, r);
    q1 * Mat::from_diagonal(&DVector::from_column_slice(sigma)) * q2.transpose()
}

/// Random rank-`r` matrix as a product of Gaussian factors.
pub fn low_rank(rng: &mut ChaCha8Rng, m: usize, n: usize, r: usize) -> Mat {
    gaussian(rng, m, r) * gaussian(rng, r, n)
}

/// Activations with full-rank but anisotropic second moment.
pub fn anisotropic(rng: &mut ChaCha8Rng, n: usize, tokens: usize) -> Mat {
    let q = orthonormal(rng, n, n);
    let scales: Vec<f64> = (0..n).map(|i| 0.05f64.powf(i as f64 / n as f64)).collect();
    let z = gaussian(rng, n, tokens);
    q * Mat::from_diagonal(&DVector::from_vec(scales)) * z
}

pub fn sorted_spectrum(rng: &mut ChaCha8Rng, r: usize) -> Vec<f64> {
    let mut s: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..10.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}
