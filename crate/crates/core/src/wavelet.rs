//! Single-level 2-D Haar analysis and synthesis over the spatial axes of a
//! `channels x bands x height x width` feature map.
//!
//! Analysis is the stride-2 valid cross-correlation of every spatial slice
//! with the unnormalised kernel bank
//!
//! ```text
//! LL = [[ 1,  1], [ 1, 1]]    LH = [[-1, -1], [ 1, 1]]
//! HL = [[-1,  1], [-1, 1]]    HH = [[ 1, -1], [-1, 1]]
//! ```
//!
//! For one 2x2 block `[[a, b], [c, d]]` the analysis matrix `H` satisfies
//! `H Hᵀ = 4 I`, so synthesis is `Hᵀ / 4`. All of the 1/4 lives in synthesis.

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletQuad<T: Scalar = f64> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> WaveletQuad<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            ll: Tensor::zeros(shape),
            lh: Tensor::zeros(shape),
            hl: Tensor::zeros(shape),
            hh: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    fn validate(&self) -> Result<(usize, usize, usize, usize)> {
        let dims = self.ll.dims4()?;
        for band in [&self.lh, &self.hl, &self.hh] {
            ensure_shape(self.ll.shape(), band.shape())?;
        }
        Ok(dims)
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            ll: self.ll.scale(s),
            lh: self.lh.scale(s),
            hl: self.hl.scale(s),
            hh: self.hh.scale(s),
        }
    }

    pub fn norm_sq(&self) -> T {
        self.ll.norm_sq() + self.lh.norm_sq() + self.hl.norm_sq() + self.hh.norm_sq()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        Ok(self.ll.dot(&other.ll)?
            + self.lh.dot(&other.lh)?
            + self.hl.dot(&other.hl)?
            + self.hh.dot(&other.hh)?)
    }
}

pub fn dwt2_haar<T: Scalar>(feat: &Tensor<T>) -> Result<WaveletQuad<T>> {
    let (c, b, h, w) = feat.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddExtent { height: h, width: w });
    }
    let (h2, w2) = (h / 2, w / 2);
    let shape = [c, b, h2, w2];
    let mut quad = WaveletQuad::zeros(&shape);
    let src = feat.data();
    for s in 0..c * b {
        let slice = &src[s * h * w..(s + 1) * h * w];
        let base = s * h2 * w2;
        for i in 0..h2 {
            let top = &slice[2 * i * w..(2 * i + 1) * w];
            let bot = &slice[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..w2 {
                let (a, bb) = (top[2 * j], top[2 * j + 1]);
                let (cc, d) = (bot[2 * j], bot[2 * j + 1]);
                let o = base + i * w2 + j;
                quad.ll.data_mut()[o] = a + bb + cc + d;
                quad.lh.data_mut()[o] = -a - bb + cc + d;
                quad.hl.data_mut()[o] = -a + bb - cc + d;
                quad.hh.data_mut()[o] = a - bb - cc + d;
            }
        }
    }
    Ok(quad)
}

pub fn idwt2_haar<T: Scalar>(quad: &WaveletQuad<T>) -> Result<Tensor<T>> {
    let q = T::cast_from(0.25);
    Ok(haar_transpose(quad)?.scale(q))
}

/// Adjoint of [`dwt2_haar`]: `Hᵀ g` per block.
pub fn dwt_backward<T: Scalar>(grad_quad: &WaveletQuad<T>) -> Result<Tensor<T>> {
    haar_transpose(grad_quad)
}

/// Adjoint of [`idwt2_haar`]: `H g / 4` per block.
pub fn idwt_backward<T: Scalar>(grad_feat: &Tensor<T>) -> Result<WaveletQuad<T>> {
    Ok(dwt2_haar(grad_feat)?.scale(T::cast_from(0.25)))
}

fn haar_transpose<T: Scalar>(quad: &WaveletQuad<T>) -> Result<Tensor<T>> {
    let (c, b, h2, w2) = quad.validate()?;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = Tensor::zeros(&[c, b, h, w]);
    let dst = out.data_mut();
    let (ll, lh, hl, hh) = (quad.ll.data(), quad.lh.data(), quad.hl.data(), quad.hh.data());
    for s in 0..c * b {
        let base = s * h2 * w2;
        let slice = &mut dst[s * h * w..(s + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let o = base + i * w2 + j;
                let (p, q, r, t) = (ll[o], lh[o], hl[o], hh[o]);
                slice[2 * i * w + 2 * j] = p - q - r + t;
                slice[2 * i * w + 2 * j + 1] = p - q + r - t;
                slice[(2 * i + 1) * w + 2 * j] = p + q - r - t;
                slice[(2 * i + 1) * w + 2 * j + 1] = p + q + r + t;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_slice() {
        let x = Tensor::<f64>::full(&[1, 1, 6, 4], 1.0);
        let q = dwt2_haar(&x).unwrap();
        assert!(q.ll.data().iter().all(|&v| v == 4.0));
        for band in [&q.lh, &q.hl, &q.hh] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(idwt2_haar(&q).unwrap(), x);
    }

    #[test]
    fn single_block_unrolled() {
        let (a, b, c, d) = (1.5, -2.0, 0.25, 7.0);
        let x = Tensor::new(&[1, 1, 2, 2], vec![a, b, c, d]).unwrap();
        let q = dwt2_haar(&x).unwrap();
        assert_eq!(q.ll.data(), &[a + b + c + d]);
        assert_eq!(q.lh.data(), &[-a - b + c + d]);
        assert_eq!(q.hl.data(), &[-a + b - c + d]);
        assert_eq!(q.hh.data(), &[a - b - c + d]);
    }

    #[test]
    fn zero_input() {
        let q = dwt2_haar(&Tensor::<f64>::zeros(&[2, 3, 4, 4])).unwrap();
        assert_eq!(q.norm_sq(), 0.0);
        let x = idwt2_haar(&WaveletQuad::<f64>::zeros(&[2, 3, 2, 2])).unwrap();
        assert_eq!(x.max_abs(), 0.0);
    }

    #[test]
    fn odd_extent_rejected() {
        let err = dwt2_haar(&Tensor::<f64>::zeros(&[1, 1, 5, 4])).unwrap_err();
        assert!(matches!(err, Error::OddExtent { height: 5, width: 4 }));
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn mismatched_quad_rejected() {
        let mut q = WaveletQuad::<f64>::zeros(&[1, 1, 2, 2]);
        q.hh = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(matches!(idwt2_haar(&q), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn perfect_reconstruction_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[1, 1, 16, 16], &mut rng);
        let back = idwt2_haar(&dwt2_haar(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
        let xf: Tensor<f32> = x.cast();
        let back = idwt2_haar(&dwt2_haar(&xf).unwrap()).unwrap();
        assert!(back.max_abs_diff(&xf).unwrap() <= 1e-5);
    }

    #[test]
    fn energy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random(&[2, 3, 8, 6], &mut rng);
            let e = dwt2_haar(&x).unwrap().norm_sq();
            assert!((e - 4.0 * x.norm_sq()).abs() <= 1e-9 * e);
        }
    }

    #[test]
    fn constant_ll_gradient_spreads_to_blocks() {
        let mut g = WaveletQuad::<f64>::zeros(&[1, 1, 3, 2]);
        g.ll.fill(1.0);
        let back = dwt_backward(&g).unwrap();
        assert!(back.data().iter().all(|&v| v == 1.0));
        let mut q4 = WaveletQuad::<f64>::zeros(&[1, 1, 3, 2]);
        q4.ll.fill(4.0);
        assert_eq!(idwt2_haar(&q4).unwrap(), back);
    }

    #[test]
    fn adjoint_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random(&[2, 2, 6, 8], &mut rng);
            let y = WaveletQuad {
                ll: random(&[2, 2, 3, 4], &mut rng),
                lh: random(&[2, 2, 3, 4], &mut rng),
                hl: random(&[2, 2, 3, 4], &mut rng),
                hh: random(&[2, 2, 3, 4], &mut rng),
            };
            let lhs = dwt2_haar(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&dwt_backward(&y).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
            let lhs = idwt2_haar(&y).unwrap().dot(&x).unwrap();
            let rhs = y.dot(&idwt_backward(&x).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g1 = random(&[1, 2, 4, 4], &mut rng);
        let g2 = random(&[1, 2, 4, 4], &mut rng);
        let (a, b) = (0.7, -1.3);
        let combo = g1.scale(a).add(&g2.scale(b)).unwrap();
        let lhs = idwt_backward(&combo).unwrap();
        let r1 = idwt_backward(&g1).unwrap();
        let r2 = idwt_backward(&g2).unwrap();
        let rhs_ll = r1.ll.scale(a).add(&r2.ll.scale(b)).unwrap();
        assert!(lhs.ll.max_abs_diff(&rhs_ll).unwrap() < 1e-12);
    }

    #[test]
    fn finite_difference_of_lh_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&[1, 2, 4, 6], &mut rng);
        let mut g = WaveletQuad::<f64>::zeros(&[1, 2, 2, 3]);
        g.lh.fill(1.0);
        let analytic = dwt_backward(&g).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fp = dwt2_haar(&xp).unwrap().lh.sum();
            let fm = dwt2_haar(&xm).unwrap().lh.sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-6 * analytic[i].abs().max(1.0));
        }
    }
}
