//! Image-quality indices for cubes: PSNR, SSIM and the spectral angle.

use std::fmt;

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::HsiCube;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 1.0;

/// Peak signal-to-noise ratio in dB over all voxels. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(x: &HsiCube, reference: &HsiCube, peak: f64) -> Result<f64> {
    ensure_shape(reference.shape(), x.shape())?;
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    if x.is_empty() {
        return Err(Error::invalid("cannot score an empty cube"));
    }
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let t = i as f64 - half;
            (-(t * t) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|t| k[t] * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|t| k[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM: 11x11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over valid windows and then bands.
pub fn ssim(x: &HsiCube, reference: &HsiCube) -> Result<f64> {
    ensure_shape(reference.shape(), x.shape())?;
    let (bands, h, w) = x.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs spatial extents of at least {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for b in 0..bands {
        let p = &x.data()[b * plane..(b + 1) * plane];
        let q = &reference.data()[b * plane..(b + 1) * plane];
        let pp: Vec<f64> = p.iter().map(|v| v * v).collect();
        let qq: Vec<f64> = q.iter().map(|v| v * v).collect();
        let pq: Vec<f64> = p.iter().zip(q).map(|(a, b)| a * b).collect();
        let mu_p = filter_valid(p, h, w, &k);
        let mu_q = filter_valid(q, h, w, &k);
        let e_pp = filter_valid(&pp, h, w, &k);
        let e_qq = filter_valid(&qq, h, w, &k);
        let e_pq = filter_valid(&pq, h, w, &k);
        let mut band_sum = 0.0;
        for i in 0..mu_p.len() {
            let (mp, mq) = (mu_p[i], mu_q[i]);
            let vp = e_pp[i] - mp * mp;
            let vq = e_qq[i] - mq * mq;
            let cov = e_pq[i] - mp * mq;
            band_sum += ((2.0 * mp * mq + c1) * (2.0 * cov + c2)) / ((mp * mp + mq * mq + c1) * (vp + vq + c2));
        }
        total += band_sum / mu_p.len() as f64;
    }
    Ok(total / bands as f64)
}

/// Mean spectral angle in radians. Pixels where either spectrum is zero
/// have no defined angle and are skipped; if every pixel is skipped the
/// result is 0.
pub fn sam(x: &HsiCube, reference: &HsiCube) -> Result<f64> {
    ensure_shape(reference.shape(), x.shape())?;
    let (bands, h, w) = x.dims3()?;
    let plane = h * w;
    let (mut sum, mut count) = (0.0, 0usize);
    for px in 0..plane {
        let (mut dot, mut nx, mut nr) = (0.0, 0.0, 0.0);
        for b in 0..bands {
            let (a, r) = (x[b * plane + px], reference[b * plane + px]);
            dot += a * r;
            nx += a * a;
            nr += r * r;
        }
        let denom = (nx * nr).sqrt();
        if denom == 0.0 {
            continue;
        }
        sum += (dot / denom).clamp(-1.0, 1.0).acos();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

impl MetricReport {
    pub fn evaluate(x: &HsiCube, reference: &HsiCube) -> Result<Self> {
        Ok(Self {
            psnr: psnr(x, reference, 1.0)?,
            ssim: ssim(x, reference)?,
            sam: sam(x, reference)?,
        })
    }

    /// Parses a line produced by `Display`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut vals = [None; 3];
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad metric token {tok:?}")))?;
            let slot = match k {
                "psnr" => 0,
                "ssim" => 1,
                "sam" => 2,
                _ => return Err(Error::invalid(format!("unknown metric {k:?}"))),
            };
            let v: f64 = v
                .parse()
                .map_err(|_| Error::invalid(format!("bad metric value {v:?}")))?;
            vals[slot] = Some(v);
        }
        match vals {
            [Some(psnr), Some(ssim), Some(sam)] => Ok(Self { psnr, ssim, sam }),
            _ => Err(Error::invalid(format!("incomplete metric line {line:?}"))),
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.psnr.is_infinite() {
            write!(f, "psnr=inf")?;
        } else {
            write!(f, "psnr={:.4}", self.psnr)?;
        }
        write!(f, " ssim={:.6} sam={:.6}", self.ssim, self.sam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{rng, uniform};
    use crate::tensor::Tensor;

    #[test]
    fn psnr_examples() {
        let x = uniform(&[3, 12, 12], 0.0, 0.8, &mut rng(110));
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let off = x.map(|v| v + 0.1);
        let p = psnr(&off, &x, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-6, "{p}");
        let p2 = psnr(&off, &x, 2.0).unwrap();
        assert!((p2 - p - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&off, &x, 1.0).unwrap(), psnr(&x, &off, 1.0).unwrap());
        assert!(psnr(&x, &Tensor::zeros(&[3, 12, 11]), 1.0).is_err());
        assert!(psnr(&x, &x, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_perturbation() {
        let x = uniform(&[2, 12, 12], 0.0, 1.0, &mut rng(111));
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let p = psnr(&x.map(|v| v + 0.02 * k as f64), &x, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let x = uniform(&[2, 16, 20], 0.0, 1.0, &mut rng(112));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = uniform(&[2, 16, 20], 0.0, 1.0, &mut rng(113));
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&x, &y).unwrap() < 0.5);

        // Constant planes: only the luminance term differs from one.
        let a = Tensor::full(&[1, 11, 11], 0.5);
        let b = Tensor::full(&[1, 11, 11], 0.7);
        let c1 = 1e-4;
        let expected = (2.0 * 0.7 * 0.5 + c1) / (0.7 * 0.7 + 0.5 * 0.5 + c1);
        assert!((ssim(&b, &a).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&Tensor::zeros(&[1, 10, 30]), &Tensor::zeros(&[1, 10, 30])).is_err());
    }

    #[test]
    fn sam_examples() {
        let x = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let y = Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert!((sam(&x, &y).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let z = uniform(&[5, 4, 4], 0.1, 1.0, &mut rng(114));
        assert_eq!(sam(&z, &z).unwrap(), 0.0);
        let w = uniform(&[5, 4, 4], 0.1, 1.0, &mut rng(115));
        let s = sam(&z, &w).unwrap();
        assert!((sam(&z.scale(3.7), &w).unwrap() - s).abs() < 1e-12);
        assert!((sam(&w, &z).unwrap() - s).abs() < 1e-15);
        // Zero spectra are skipped.
        let zero = Tensor::zeros(&[2, 1, 1]);
        assert_eq!(sam(&zero, &zero).unwrap(), 0.0);
    }

    #[test]
    fn report_line_round_trip() {
        let x = uniform(&[2, 12, 12], 0.0, 1.0, &mut rng(116));
        let r = MetricReport::evaluate(&x, &x).unwrap();
        let line = r.to_string();
        assert_eq!(line, "psnr=inf ssim=1.000000 sam=0.000000");
        let back = MetricReport::parse(&line).unwrap();
        assert_eq!(back.psnr, f64::INFINITY);
        assert!(MetricReport::parse("psnr=1 ssim=2").is_err());
    }
}
