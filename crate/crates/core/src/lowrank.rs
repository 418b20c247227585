//! Rank minimisation module: adaptive singular value thresholding of the
//! low-frequency Haar band, with a hand-written SVD backward pass.
//!
//! Forward, for a `bands x pixels` matrix `W = U Σ Vᵀ`:
//!
//! ```text
//! W' = Σᵢ relu(σᵢ - sigmoid(d)·σ₁) uᵢ vᵢᵀ
//! ```
//!
//! Backward goes through the SVD with `K[i][j] = 1/(σᵢ² - σⱼ²)` replaced by
//! its degree-9 geometric-series truncation ([`taylor_k`]), which stays
//! bounded by `10 / (2σ²)` when two singular values coincide.

use crate::error::{ensure_shape, Error, Result};
use crate::svd::{svd_thin, SvdFactors};
use crate::tensor::{FeatureMap, Tensor};
use crate::wavelet::{dwt2_haar, dwt_backward, idwt2_haar, idwt_backward};

/// Number of terms kept in the truncated series for `K`.
pub const TAYLOR_TERMS: i32 = 10;

/// Initial value of `d` for training; `sigmoid(-4) ≈ 0.018`.
pub const D_INIT: f64 = -4.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Learnable threshold logit. The effective threshold is `sigmoid(d)·σ₁`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdParam {
    pub d: f64,
}

impl ThresholdParam {
    pub fn new(d: f64) -> Self {
        Self { d }
    }

    pub fn ratio(&self) -> f64 {
        sigmoid(self.d)
    }

    pub fn threshold(&self, sigma1: f64) -> f64 {
        self.ratio() * sigma1
    }
}

impl Default for ThresholdParam {
    fn default() -> Self {
        Self { d: D_INIT }
    }
}

/// Which map from `(∂L/∂U, ∂L/∂Σ, ∂L/∂V)` to `∂L/∂W` is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SvdBackward {
    /// `U {2Σ (Kᵀ∘(Vᵀ ∂L/∂V))_sym + (∂L/∂Σ)_diag} Vᵀ` only. Drops the
    /// `∂L/∂U` path and the orthogonal-complement terms.
    Reduced,
    /// Reduced form plus the symmetric `∂L/∂U` term and the complement
    /// terms `(I - UUᵀ) Ū Σ⁻¹ Vᵀ + U Σ⁻¹ V̄ᵀ (I - VVᵀ)`.
    #[default]
    Full,
}

/// How `K[i][j]` is evaluated in the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelMode {
    #[default]
    Taylor,
    /// Plain `1/(σᵢ² - σⱼ²)`; diverges for repeated singular values.
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SvtOptions {
    pub backward: SvdBackward,
    pub kernel: KernelMode,
}

/// Truncated-series surrogate for `1/(σᵢ² - σⱼ²)`:
///
/// `(1/(σᵢ+σⱼ)) (1/σ_max) Σ_{k=0}^{9} (σ_min/σ_max)^k`, negated when
/// `σᵢ < σⱼ`. Equal arguments take the positive branch.
pub fn taylor_k(sigma_i: f64, sigma_j: f64) -> Result<f64> {
    if sigma_i < 0.0 || sigma_j < 0.0 || !sigma_i.is_finite() || !sigma_j.is_finite() {
        return Err(Error::invalid(format!(
            "singular values must be finite and nonnegative, got ({sigma_i}, {sigma_j})"
        )));
    }
    if sigma_i == 0.0 && sigma_j == 0.0 {
        return Err(Error::invalid("taylor_k is undefined when both singular values are zero"));
    }
    Ok(taylor_k_unchecked(sigma_i, sigma_j))
}

fn taylor_k_unchecked(sigma_i: f64, sigma_j: f64) -> f64 {
    let (hi, lo, sign) = if sigma_i >= sigma_j {
        (sigma_i, sigma_j, 1.0)
    } else {
        (sigma_j, sigma_i, -1.0)
    };
    let ratio = lo / hi;
    let mut series = 0.0;
    let mut term = 1.0;
    for _ in 0..TAYLOR_TERMS {
        series += term;
        term *= ratio;
    }
    sign * series / ((sigma_i + sigma_j) * hi)
}

pub fn exact_k(sigma_i: f64, sigma_j: f64) -> f64 {
    1.0 / (sigma_i * sigma_i - sigma_j * sigma_j)
}

/// The `r x r` matrix `K` (row-major) used by the backward pass; the
/// diagonal and pairs of zero singular values are 0.
pub fn k_matrix(sigma: &[f64], mode: KernelMode) -> Vec<f64> {
    let r = sigma.len();
    let mut k = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            if i == j || (sigma[i] == 0.0 && sigma[j] == 0.0) {
                continue;
            }
            k[i * r + j] = match mode {
                KernelMode::Taylor => taylor_k_unchecked(sigma[i], sigma[j]),
                KernelMode::Exact => exact_k(sigma[i], sigma[j]),
            };
        }
    }
    k
}

/// State kept from [`svt_adaptive_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct SvtCache {
    pub factors: SvdFactors<f64>,
    pub d_value: f64,
    pub input_shape: (usize, usize),
    /// `σᵢ - t > 0`.
    pub kept_mask: Vec<bool>,
    /// Shrunk singular values `relu(σᵢ - t)`.
    pub shrunk: Vec<f64>,
    pub options: SvtOptions,
}

impl SvtCache {
    pub fn k_matrix(&self) -> Vec<f64> {
        k_matrix(&self.factors.sigma, self.options.kernel)
    }
}

pub fn svt_adaptive_forward(w: &Tensor, d: ThresholdParam) -> Result<(Tensor, SvtCache)> {
    svt_adaptive_forward_with(w, d, SvtOptions::default())
}

pub fn svt_adaptive_forward_with(
    w: &Tensor,
    d: ThresholdParam,
    options: SvtOptions,
) -> Result<(Tensor, SvtCache)> {
    let (rows, cols) = w.dims2()?;
    if !d.d.is_finite() {
        return Err(Error::NonFinite("threshold parameter d".into()));
    }
    let factors = svd_thin(w)?;
    let t = d.threshold(factors.sigma[0]);
    let kept_mask: Vec<bool> = factors.sigma.iter().map(|&s| s - t > 0.0).collect();
    let shrunk: Vec<f64> = factors.sigma.iter().map(|&s| (s - t).max(0.0)).collect();
    let out = factors.reconstruct_with(&shrunk);
    Ok((
        out,
        SvtCache {
            factors,
            d_value: d.d,
            input_shape: (rows, cols),
            kept_mask,
            shrunk,
            options,
        },
    ))
}

/// Returns `(∂L/∂W, ∂L/∂d)` given `∂L/∂W'`.
pub fn svt_adaptive_backward(cache: &SvtCache, grad_out: &Tensor) -> Result<(Tensor, f64)> {
    let (m, n) = cache.input_shape;
    ensure_shape(&[m, n], grad_out.shape())?;
    let f = &cache.factors;
    let r = f.sigma.len();
    let sigma = &f.sigma;
    let s = &cache.shrunk;
    let u = &f.u;
    let v = &f.v;
    let ut = u.transpose2()?;
    let vt = v.transpose2()?;

    // A = Uᵀ G V
    let gv = grad_out.matmul(v)?;
    let a = ut.matmul(&gv)?;
    let a = a.data();

    // Singular-value gradients, including the threshold's dependence on σ₁
    // and on d.
    let ratio = sigmoid(cache.d_value);
    let kept_sum: f64 = (0..r).filter(|&i| cache.kept_mask[i]).map(|i| a[i * r + i]).sum();
    let mut sigma_bar: Vec<f64> = (0..r)
        .map(|i| if cache.kept_mask[i] { a[i * r + i] } else { 0.0 })
        .collect();
    sigma_bar[0] -= ratio * kept_sum;
    let grad_d = -sigma[0] * ratio * (1.0 - ratio) * kept_sum;

    let k = cache.k_matrix();
    // Middle r x r factor J of U J Vᵀ.
    let mut j = vec![0.0; r * r];
    for p in 0..r {
        for q in 0..r {
            if p == q {
                j[p * r + q] = sigma_bar[p];
                continue;
            }
            // (Kᵀ)_pq = K_qp
            let kt = k[q * r + p];
            // V-path: σ_p Kᵀ_pq ((VᵀV̄)_pq - (V̄ᵀV)_pq), VᵀV̄ = Aᵀ diag(s).
            let v_term = sigma[p] * kt * (a[q * r + p] * s[q] - s[p] * a[p * r + q]);
            j[p * r + q] = match cache.options.backward {
                SvdBackward::Reduced => v_term,
                SvdBackward::Full => {
                    // U-path: Kᵀ_pq ((UᵀŪ)_pq - (ŪᵀU)_pq) σ_q, UᵀŪ = A diag(s).
                    let u_term = kt * (a[p * r + q] * s[q] - s[p] * a[q * r + p]) * sigma[q];
                    v_term + u_term
                }
            };
        }
    }
    let j = Tensor::new(&[r, r], j)?;
    let mut grad_in = u.matmul(&j)?.matmul(&vt)?;

    if cache.options.backward == SvdBackward::Full {
        let scale: Vec<f64> = (0..r)
            .map(|i| if sigma[i] > 0.0 { s[i] / sigma[i] } else { 0.0 })
            .collect();
        // (I - UUᵀ) G V diag(s/σ) Vᵀ
        let mut p = gv.clone();
        scale_columns(&mut p, &scale);
        let p_perp = p.sub(&u.matmul(&ut.matmul(&p)?)?)?;
        grad_in.add_assign(&p_perp.matmul(&vt)?)?;
        // U diag(s/σ) Uᵀ G (I - VVᵀ)
        let mut q = ut.matmul(grad_out)?;
        scale_rows(&mut q, &scale);
        let q_perp = q.sub(&q.matmul(v)?.matmul(&vt)?)?;
        grad_in.add_assign(&u.matmul(&q_perp)?)?;
    }

    Ok((grad_in, grad_d))
}

fn scale_columns(t: &mut Tensor, scale: &[f64]) {
    let cols = scale.len();
    for (idx, x) in t.data_mut().iter_mut().enumerate() {
        *x *= scale[idx % cols];
    }
}

fn scale_rows(t: &mut Tensor, scale: &[f64]) {
    let cols = t.shape()[1];
    for (idx, x) in t.data_mut().iter_mut().enumerate() {
        *x *= scale[idx / cols];
    }
}

/// Cached state of one [`rmm_apply`] call.
#[derive(Clone, Debug)]
pub struct RmmCache {
    pub shape: [usize; 4],
    pub channels: Vec<SvtCache>,
}

pub fn rmm_apply(feat: &FeatureMap, d: ThresholdParam) -> Result<(FeatureMap, RmmCache)> {
    rmm_apply_with(feat, d, SvtOptions::default())
}

/// Haar analysis, SVT of every channel's `bands x (H/2·W/2)` LL matrix with
/// a shared `d`, then synthesis with the untouched high bands.
pub fn rmm_apply_with(
    feat: &FeatureMap,
    d: ThresholdParam,
    options: SvtOptions,
) -> Result<(FeatureMap, RmmCache)> {
    let (c, b, h, w) = feat.dims4()?;
    let mut quad = dwt2_haar(feat)?;
    let per = b * (h / 2) * (w / 2);
    let mut channels = Vec::with_capacity(c);
    for ch in 0..c {
        let slice = &quad.ll.data()[ch * per..(ch + 1) * per];
        let mat = Tensor::new(&[b, (h / 2) * (w / 2)], slice.to_vec())?;
        let (shrunk, cache) = svt_adaptive_forward_with(&mat, d, options)?;
        quad.ll.data_mut()[ch * per..(ch + 1) * per].copy_from_slice(shrunk.data());
        channels.push(cache);
    }
    let out = idwt2_haar(&quad)?;
    Ok((
        out,
        RmmCache {
            shape: [c, b, h, w],
            channels,
        },
    ))
}

/// Returns `(∂L/∂feat, ∂L/∂d)`; `∂L/∂d` is summed over channels in order.
pub fn rmm_backward(cache: &RmmCache, grad_out: &FeatureMap) -> Result<(FeatureMap, f64)> {
    ensure_shape(&cache.shape, grad_out.shape())?;
    let [_, b, h, w] = cache.shape;
    let mut gq = idwt_backward(grad_out)?;
    let cols = (h / 2) * (w / 2);
    let per = b * cols;
    let mut grad_d = 0.0;
    for (ch, svt) in cache.channels.iter().enumerate() {
        let slice = &gq.ll.data()[ch * per..(ch + 1) * per];
        let g = Tensor::new(&[b, cols], slice.to_vec())?;
        let (gin, gd) = svt_adaptive_backward(svt, &g)?;
        gq.ll.data_mut()[ch * per..(ch + 1) * per].copy_from_slice(gin.data());
        grad_d += gd;
    }
    Ok((dwt_backward(&gq)?, grad_d))
}
