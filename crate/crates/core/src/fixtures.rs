//! Seeded random inputs shared by the test suites and the `grad-check` and
//! `self-test` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::svd::svd_thin;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// An `rows x cols` matrix `U diag(spectrum) Vᵀ` with random orthonormal
/// `U`, `V`. `spectrum.len()` must equal `min(rows, cols)`.
pub fn matrix_with_spectrum(rows: usize, cols: usize, spectrum: &[f64], rng: &mut ChaCha8Rng) -> Tensor {
    let r = rows.min(cols);
    assert_eq!(spectrum.len(), r);
    let left = svd_thin(&normal(&[rows, r], rng)).expect("finite gaussian matrix");
    let right = svd_thin(&normal(&[cols, r], rng)).expect("finite gaussian matrix");
    let mut f = left;
    f.v = right.u;
    f.reconstruct_with(spectrum)
}

/// Geometric spectrum `top, top*ratio, top*ratio^2, ...`.
pub fn geometric_spectrum(len: usize, top: f64, ratio: f64) -> Vec<f64> {
    (0..len).map(|k| top * ratio.powi(k as i32)).collect()
}
