//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations act on the shorter side of the matrix: rows when
//! `m <= n` (implicitly diagonalising `M Mᵀ`), columns otherwise. The
//! rotation accumulator then gives one set of singular vectors exactly
//! orthogonal and the other set comes from normalising the rotated vectors.
//! Work is done in `f64` regardless of the storage precision; the
//! convergence tolerance follows the storage precision.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAX_SWEEPS: usize = 100;

/// `M = U diag(sigma) Vᵀ` with `r = min(m, n)` columns in `u` (m x r) and
/// `v` (n x r). Singular values are descending and nonnegative; the first
/// nonzero entry of every column of `u` is nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors<T: Scalar = f64> {
    pub u: Tensor<T>,
    pub sigma: Vec<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> SvdFactors<T> {
    pub fn rows(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) Vᵀ`.
    pub fn reconstruct(&self) -> Tensor<T> {
        self.reconstruct_with(&self.sigma)
    }

    /// `U diag(values) Vᵀ` for replacement singular values.
    pub fn reconstruct_with(&self, values: &[T]) -> Tensor<T> {
        let (m, n, r) = (self.rows(), self.cols(), self.rank_bound());
        assert_eq!(values.len(), r);
        let u = self.u.data();
        let v = self.v.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for k in 0..r {
                let a = u[i * r + k] * values[k];
                if a == T::zero() {
                    continue;
                }
                for (j, o) in row.iter_mut().enumerate() {
                    *o = *o + a * v[j * r + k];
                }
            }
        }
        Tensor::new(&[m, n], out).expect("extents are consistent")
    }
}

pub fn svd_thin<T: Scalar>(m: &Tensor<T>) -> Result<SvdFactors<T>> {
    svd_thin_capped(m, MAX_SWEEPS)
}

pub(crate) fn svd_thin_capped<T: Scalar>(m: &Tensor<T>, max_sweeps: usize) -> Result<SvdFactors<T>> {
    let (rows, cols) = m.dims2()?;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("cannot decompose an empty {rows}x{cols} matrix")));
    }
    m.ensure_finite("svd_thin input")?;

    let wide = rows <= cols;
    let k = rows.min(cols);
    let len = rows.max(cols);
    let src: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();

    // Working vectors: rows of M when wide, columns when tall.
    let mut vecs: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            if wide {
                src[i * cols..(i + 1) * cols].to_vec()
            } else {
                (0..rows).map(|p| src[p * cols + i]).collect()
            }
        })
        .collect();
    let mut rot: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            e
        })
        .collect();

    let fro = src.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = T::SVD_TOL;
    let negligible = tol * fro;

    if fro > 0.0 {
        let mut converged = false;
        for _ in 0..max_sweeps {
            let mut rotated = false;
            for i in 0..k {
                for j in (i + 1)..k {
                    let (alpha, beta, gamma) = gram_entries(&vecs[i], &vecs[j]);
                    if alpha.sqrt() <= negligible || beta.sqrt() <= negligible {
                        continue;
                    }
                    if gamma.abs() <= tol * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate_pair(&mut vecs, i, j, c, s);
                    rotate_pair(&mut rot, i, j, c, s);
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::SvdNoConvergence {
                rows,
                cols,
                sweeps: max_sweeps,
            });
        }
    }

    let norms: Vec<f64> = vecs.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    // Accumulated rotations: exactly orthogonal side.
    let exact: Vec<Vec<f64>> = order.iter().map(|&i| rot[i].clone()).collect();
    // Normalised rotated vectors; negligible ones are completed below.
    let mut normalized: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&i| {
            let nrm = norms[i];
            if nrm > negligible && nrm > 0.0 {
                Some(vecs[i].iter().map(|x| x / nrm).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut normalized, len);
    let normalized: Vec<Vec<f64>> = normalized.into_iter().map(|v| v.expect("completed")).collect();

    let (mut ucols, mut vcols) = if wide {
        (exact, normalized)
    } else {
        (normalized, exact)
    };

    for (uc, vc) in ucols.iter_mut().zip(vcols.iter_mut()) {
        if let Some(&first) = uc.iter().find(|x| **x != 0.0) {
            if first < 0.0 {
                uc.iter_mut().for_each(|x| *x = -*x);
                vc.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    Ok(SvdFactors {
        u: columns_to_tensor(&ucols, rows),
        sigma: sigma.into_iter().map(T::cast_from).collect(),
        v: columns_to_tensor(&vcols, cols),
    })
}

fn gram_entries(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(vecs: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other slot,
/// by Gram-Schmidt on the standard basis.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], len: usize) {
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..len {
            let mut cand = vec![0.0; len];
            cand[e] = 1.0;
            // Two passes of modified Gram-Schmidt for stability.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj: f64 = other.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= proj * o);
                }
            }
            let nrm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| nrm > *b + 1e-12) {
                best = Some((nrm, cand));
            }
            if nrm > 0.7 {
                break;
            }
        }
        let (nrm, cand) = best.expect("len >= number of columns");
        cols[slot] = Some(cand.into_iter().map(|x| x / nrm).collect());
    }
}

fn columns_to_tensor<T: Scalar>(cols: &[Vec<f64>], len: usize) -> Tensor<T> {
    let r = cols.len();
    let mut data = vec![T::zero(); len * r];
    for (k, col) in cols.iter().enumerate() {
        for (p, &x) in col.iter().enumerate() {
            data[p * r + k] = T::cast_from(x);
        }
    }
    Tensor::new(&[len, r], data).expect("extents are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(&[rows, cols], |_| rng.sample(StandardNormal))
    }

    fn orthonormality_error<T: Scalar>(q: &Tensor<T>) -> f64 {
        let g = q.transpose2().unwrap().matmul(q).unwrap();
        let r = g.shape()[0];
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.data()[i * r + j].as_f64() - target).abs());
            }
        }
        worst
    }

    fn check_invariants(m: &Tensor<f64>, f: &SvdFactors<f64>) {
        for w in f.sigma.windows(2) {
            assert!(w[0] >= w[1] && w[1] >= 0.0, "{:?}", f.sigma);
        }
        assert!(orthonormality_error(&f.u) <= 1e-10);
        assert!(orthonormality_error(&f.v) <= 1e-10);
        let err = f.reconstruct().max_abs_diff(m).unwrap();
        assert!(err <= 1e-9 * f.sigma[0].max(f64::MIN_POSITIVE), "reconstruction error {err}");
    }

    #[test]
    fn diagonal_matrix() {
        let m = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let f = svd_thin(&m).unwrap();
        assert_eq!(f.sigma, vec![3.0, 1.0]);
        assert_eq!(f.u, Tensor::eye(2));
        assert_eq!(f.v, Tensor::eye(2));
    }

    #[test]
    fn all_ones_has_one_nonzero_singular_value() {
        let m = Tensor::<f64>::full(&[2, 2], 1.0);
        let f = svd_thin(&m).unwrap();
        assert!((f.sigma[0] - 2.0).abs() < 1e-14);
        assert!(f.sigma[1].abs() < 1e-14);
        check_invariants(&m, &f);
    }

    #[test]
    fn random_wide_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(8, 20, &mut rng);
        let f = svd_thin(&m).unwrap();
        assert_eq!(f.u.shape(), &[8, 8]);
        assert_eq!(f.v.shape(), &[20, 8]);
        check_invariants(&m, &f);
    }

    #[test]
    fn shape_classes_hold_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..400 {
            let (rows, cols) = (rng.random_range(1..12), rng.random_range(1..12));
            let m = match case % 4 {
                0 => random(rows.max(cols) + 1, rows.min(cols), &mut rng),
                1 => random(rows.min(cols), rows.max(cols) + 1, &mut rng),
                2 => random(rows, rows, &mut rng),
                _ => {
                    // rank-deficient: product of thin factors
                    let r = rng.random_range(1..=rows.min(cols));
                    let a = random(rows + 2, r, &mut rng);
                    let b = random(r, cols + 1, &mut rng);
                    a.matmul(&b).unwrap()
                }
            };
            let f = svd_thin(&m).unwrap();
            check_invariants(&m, &f);
        }
    }

    #[test]
    fn rank_deficient_completes_basis() {
        let mut m = Tensor::<f64>::zeros(&[5, 3]);
        m.data_mut()[0] = 2.0;
        let f = svd_thin(&m).unwrap();
        assert_eq!(f.sigma, vec![2.0, 0.0, 0.0]);
        check_invariants(&m, &f);
        let z = Tensor::<f64>::zeros(&[3, 4]);
        let f = svd_thin(&z).unwrap();
        assert!(f.sigma.iter().all(|&s| s == 0.0));
        assert!(orthonormality_error(&f.u) < 1e-12);
        assert!(orthonormality_error(&f.v) < 1e-12);
    }

    #[test]
    fn transpose_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (rows, cols) = (rng.random_range(1..15), rng.random_range(1..15));
            let m = random(rows, cols, &mut rng);
            let a = svd_thin(&m).unwrap();
            let b = svd_thin(&m.transpose2().unwrap()).unwrap();
            for (x, y) in a.sigma.iter().zip(&b.sigma) {
                assert!((x - y).abs() <= 1e-6 * x.max(1e-300), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random(9, 13, &mut rng);
        assert_eq!(svd_thin(&m).unwrap(), svd_thin(&m).unwrap());
    }

    #[test]
    fn sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random(6, 4, &mut rng);
        let f = svd_thin(&m).unwrap();
        let r = f.rank_bound();
        for k in 0..r {
            let first = (0..f.rows()).map(|i| f.u.data()[i * r + k]).find(|x| *x != 0.0).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn single_precision_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let m: Tensor<f32> = random(7, 19, &mut rng).cast();
            let f = svd_thin(&m).unwrap();
            assert!(orthonormality_error(&f.u) <= 1e-5);
            assert!(orthonormality_error(&f.v) <= 1e-5);
            let err = f.reconstruct().max_abs_diff(&m).unwrap();
            assert!(err <= 1e-4 * f.sigma[0]);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let m = Tensor::new(&[2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(matches!(svd_thin(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sweep_cap_reports_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random(6, 9, &mut rng);
        match svd_thin_capped(&m, 1) {
            Err(Error::SvdNoConvergence { rows, cols, .. }) => assert_eq!((rows, cols), (6, 9)),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }
}
