//! Procedural clean cubes with a known low spectral rank, for smoke tests
//! and small training runs.

use rand::Rng;

use crate::fixtures::rng;
use crate::tensor::HsiCube;

/// A `bands x height x width` cube `Σ_r a_r(x, y)·s_r(λ)`: `rank` smooth
/// spectral signatures (sums of Gaussian bumps) mixed by smooth spatial
/// abundance maps (softmax of low-frequency sinusoids). Scaled so the
/// maximum is 0.9; values are positive. The band-by-pixel matrix has rank
/// at most `rank`.
pub fn low_rank_cube(bands: usize, height: usize, width: usize, rank: usize, seed: u64) -> HsiCube {
    assert!(bands >= 2 && rank >= 1, "need at least 2 bands and rank 1");
    let mut r = rng(seed);
    let signatures: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| (r.random_range(0.3..1.0), r.random::<f64>(), r.random_range(0.1..0.4)))
                .collect();
            let base = r.random_range(0.05..0.2);
            (0..bands)
                .map(|i| {
                    let t = i as f64 / (bands - 1) as f64;
                    base + bumps
                        .iter()
                        .map(|&(a, c, w)| a * (-(t - c).powi(2) / (2.0 * w * w)).exp())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();

    let waves: Vec<Vec<(f64, f64, f64, f64)>> = (0..rank)
        .map(|_| {
            (0..3)
                .map(|_| {
                    (
                        r.random_range(0.5..2.0),
                        r.random_range(-3.0..3.0),
                        r.random_range(-3.0..3.0),
                        r.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect()
        })
        .collect();
    let plane = height * width;
    let mut abundance = vec![0.0; rank * plane];
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
            let logits: Vec<f64> = waves
                .iter()
                .map(|ws| {
                    ws.iter()
                        .map(|&(a, fx, fy, p)| a * (std::f64::consts::TAU * (fx * u + fy * v) + p).sin())
                        .sum()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..rank {
                abundance[k * plane + y * width + x] = e[k] / s;
            }
        }
    }

    let mut cube = HsiCube::zeros(&[bands, height, width]);
    for b in 0..bands {
        let dst = &mut cube.data_mut()[b * plane..(b + 1) * plane];
        for (k, sig) in signatures.iter().enumerate() {
            let a = &abundance[k * plane..(k + 1) * plane];
            for (d, &av) in dst.iter_mut().zip(a) {
                *d += sig[b] * av;
            }
        }
    }
    let peak = cube.max_abs();
    cube.map(|v| 0.9 * v / peak)
}

/// `count` cubes with seeds `seed, seed + 1, ...`.
pub fn low_rank_dataset(count: usize, shape: [usize; 3], rank: usize, seed: u64) -> Vec<HsiCube> {
    (0..count)
        .map(|i| low_rank_cube(shape[0], shape[1], shape[2], rank, seed.wrapping_add(i as u64)))
        .collect()
}
