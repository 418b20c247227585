//! Seeded synthetic corruption of clean cubes.
//!
//! Cubes hold values in [0, 1]; every standard deviation given here is on
//! the 8-bit scale (0..255) and is divided by 255 before use.
//!
//! Randomness comes from ChaCha8 keyed by [`NoiseSpec::seed`]. Each purpose
//! (per-band σ draws, band `b`'s Gaussian field, the mixture layout, ...)
//! reads its own ChaCha stream, so results do not depend on evaluation
//! order.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::HsiCube;

pub const GRAY_LEVELS: f64 = 255.0;

const STREAM_SIGMAS: u64 = 1;
const STREAM_LAYOUT: u64 = 2;
const STREAM_GAUSS_BASE: u64 = 1 << 32;
const STREAM_IMPULSE_BASE: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    NoniidGaussian,
    Mixture,
    CorrVariance,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::NoniidGaussian => "noniid_gaussian",
            NoiseKind::Mixture => "mixture",
            NoiseKind::CorrVariance => "corr_variance",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noniid_gaussian" | "noniid" => Ok(NoiseKind::NoniidGaussian),
            "mixture" => Ok(NoiseKind::Mixture),
            "corr_variance" | "corr" => Ok(NoiseKind::CorrVariance),
            _ => Err(Error::invalid(format!(
                "unknown noise kind {s:?} (expected noniid, mixture or corr)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub beta: f64,
    pub eta: f64,
    pub impulse_lo: f64,
    pub impulse_hi: f64,
    pub stripe_frac_lo: f64,
    pub stripe_frac_hi: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::NoniidGaussian,
            sigma_lo: 0.0,
            sigma_hi: 95.0,
            beta: 23.08,
            eta: 0.157,
            impulse_lo: 0.1,
            impulse_hi: 0.7,
            stripe_frac_lo: 0.05,
            stripe_frac_hi: 0.15,
            seed: 0,
        }
    }
}

const KEYS: [&str; 10] = [
    "kind",
    "sigma_lo",
    "sigma_hi",
    "beta",
    "eta",
    "impulse_lo",
    "impulse_hi",
    "stripe_frac_lo",
    "stripe_frac_hi",
    "seed",
];

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("sigma_lo", self.sigma_lo),
            ("sigma_hi", self.sigma_hi),
            ("beta", self.beta),
            ("eta", self.eta),
            ("impulse_lo", self.impulse_lo),
            ("impulse_hi", self.impulse_hi),
            ("stripe_frac_lo", self.stripe_frac_lo),
            ("stripe_frac_hi", self.stripe_frac_hi),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be finite, got {v}")));
        }
        if !(0.0 <= self.sigma_lo && self.sigma_lo <= self.sigma_hi) {
            return Err(Error::invalid(format!(
                "need 0 <= sigma_lo <= sigma_hi, got [{}, {}]",
                self.sigma_lo, self.sigma_hi
            )));
        }
        for (name, lo, hi) in [
            ("impulse", self.impulse_lo, self.impulse_hi),
            ("stripe_frac", self.stripe_frac_lo, self.stripe_frac_hi),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(format!(
                    "{name} range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
                )));
            }
        }
        if self.beta <= 0.0 || self.eta <= 0.0 {
            return Err(Error::invalid(format!(
                "beta and eta must be positive, got {} and {}",
                self.beta, self.eta
            )));
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_config(&self) -> String {
        let values = [
            self.kind.to_string(),
            self.sigma_lo.to_string(),
            self.sigma_hi.to_string(),
            self.beta.to_string(),
            self.eta.to_string(),
            self.impulse_lo.to_string(),
            self.impulse_hi.to_string(),
            self.stripe_frac_lo.to_string(),
            self.stripe_frac_hi.to_string(),
            self.seed.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// ignored; missing keys keep their defaults.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut spec = NoiseSpec::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config {
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("{key}: {value:?} is not a number")))
            };
            match key {
                "kind" => spec.kind = value.parse().map_err(|e: Error| err(e.to_string()))?,
                "sigma_lo" => spec.sigma_lo = num()?,
                "sigma_hi" => spec.sigma_hi = num()?,
                "beta" => spec.beta = num()?,
                "eta" => spec.eta = num()?,
                "impulse_lo" => spec.impulse_lo = num()?,
                "impulse_hi" => spec.impulse_hi = num()?,
                "stripe_frac_lo" => spec.stripe_frac_lo = num()?,
                "stripe_frac_hi" => spec.stripe_frac_hi = num()?,
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| err(format!("seed: {value:?} is not an unsigned integer")))?
                }
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        spec.validate().map_err(|e| Error::Config {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(id);
        r
    }
}

/// Mixes a base seed with two indices into a new seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Per-band standard deviations (0..255 scale) drawn uniformly from
/// `[sigma_lo, sigma_hi]`.
pub fn band_sigmas(spec: &NoiseSpec, bands: usize) -> Vec<f64> {
    let mut r = spec.stream(STREAM_SIGMAS);
    (0..bands).map(|_| draw(&mut r, spec.sigma_lo, spec.sigma_hi)).collect()
}

/// Standard deviation (0..255 scale) of band `i` under the Gaussian-curve
/// profile `β·exp(-(i/c - 1/2)² / (4η²))` with `c = bands - 1`.
pub fn corr_sigma(i: usize, bands: usize, beta: f64, eta: f64) -> f64 {
    let c = (bands - 1) as f64;
    let t = i as f64 / c - 0.5;
    beta * (-(t * t) / (4.0 * eta * eta)).exp()
}

fn add_band_gaussian(out: &mut HsiCube, spec: &NoiseSpec, sigmas: &[f64]) -> Result<()> {
    let (_, h, w) = out.dims3()?;
    let plane = h * w;
    for (b, &s) in sigmas.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let sd = s / GRAY_LEVELS;
        let mut r = spec.stream(STREAM_GAUSS_BASE + b as u64);
        for v in &mut out.data_mut()[b * plane..(b + 1) * plane] {
            let n: f64 = r.sample(StandardNormal);
            *v += sd * n;
        }
    }
    Ok(())
}

fn checked(x: &HsiCube, spec: &NoiseSpec) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    x.ensure_finite("clean cube")?;
    x.dims3()
}

pub fn add_noniid_gaussian(x: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    let (bands, _, _) = checked(x, spec)?;
    let mut out = x.clone();
    add_band_gaussian(&mut out, spec, &band_sigmas(spec, bands))?;
    Ok(out)
}

pub fn add_corr_variance(x: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    let (bands, _, _) = checked(x, spec)?;
    if bands < 2 {
        return Err(Error::invalid("correlated-variance noise needs at least 2 bands"));
    }
    let sigmas: Vec<f64> = (0..bands).map(|i| corr_sigma(i, bands, spec.beta, spec.eta)).collect();
    let mut out = x.clone();
    add_band_gaussian(&mut out, spec, &sigmas)?;
    Ok(out)
}

/// Which bands carry which extra corruption in [`add_mixture`].
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePlan {
    /// `(band, ratio)`.
    pub impulse: Vec<(usize, f64)>,
    /// `(band, [(column, offset)])`.
    pub stripes: Vec<(usize, Vec<(usize, f64)>)>,
    /// `(band, [column])`.
    pub deadlines: Vec<(usize, Vec<usize>)>,
}

fn struck_columns(r: &mut impl Rng, width: usize, lo: f64, hi: f64) -> Vec<usize> {
    let frac = draw(r, lo, hi);
    let count = ((frac * width as f64).round() as usize).clamp(1, width);
    let mut cols = sample(r, width, count).into_vec();
    cols.sort_unstable();
    cols
}

pub fn plan_mixture(bands: usize, width: usize, spec: &NoiseSpec) -> Result<MixturePlan> {
    if bands < 3 {
        return Err(Error::invalid(format!("mixture noise needs at least 3 bands, got {bands}")));
    }
    let mut r = spec.stream(STREAM_LAYOUT);
    let mut order: Vec<usize> = (0..bands).collect();
    order.shuffle(&mut r);
    let size = |i: usize| bands / 3 + usize::from(i < bands % 3);
    let (n1, n2) = (size(0), size(1));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let (g1, g2, g3) = (
        sorted(&order[..n1]),
        sorted(&order[n1..n1 + n2]),
        sorted(&order[n1 + n2..]),
    );
    let impulse = g1
        .into_iter()
        .map(|b| (b, draw(&mut r, spec.impulse_lo, spec.impulse_hi)))
        .collect();
    let stripes = g2
        .into_iter()
        .map(|b| {
            let cols = struck_columns(&mut r, width, spec.stripe_frac_lo, spec.stripe_frac_hi);
            (b, cols.into_iter().map(|c| (c, draw(&mut r, -0.25, 0.25))).collect())
        })
        .collect();
    let deadlines = g3
        .into_iter()
        .map(|b| (b, struck_columns(&mut r, width, spec.stripe_frac_lo, spec.stripe_frac_hi)))
        .collect();
    Ok(MixturePlan {
        impulse,
        stripes,
        deadlines,
    })
}

/// Band-wise Gaussian noise, then impulse, stripe and deadline corruption
/// on three disjoint thirds of the bands.
pub fn add_mixture(x: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    let (bands, h, w) = checked(x, spec)?;
    let plan = plan_mixture(bands, w, spec)?;
    let mut out = x.clone();
    add_band_gaussian(&mut out, spec, &band_sigmas(spec, bands))?;
    let plane = h * w;
    let data = out.data_mut();
    for &(b, ratio) in &plan.impulse {
        let mut r = spec.stream(STREAM_IMPULSE_BASE + b as u64);
        for v in &mut data[b * plane..(b + 1) * plane] {
            if r.random::<f64>() < ratio {
                *v = if r.random::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }
    for (b, cols) in &plan.stripes {
        for &(c, offset) in cols {
            for row in 0..h {
                data[b * plane + row * w + c] += offset;
            }
        }
    }
    for (b, cols) in &plan.deadlines {
        for &c in cols {
            for row in 0..h {
                data[b * plane + row * w + c] = 0.0;
            }
        }
    }
    Ok(out)
}

pub fn apply(x: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    match spec.kind {
        NoiseKind::NoniidGaussian => add_noniid_gaussian(x, spec),
        NoiseKind::Mixture => add_mixture(x, spec),
        NoiseKind::CorrVariance => add_corr_variance(x, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cube(b: usize, h: usize, w: usize) -> HsiCube {
        Tensor::full(&[b, h, w], 0.5)
    }

    fn band_std(noisy: &HsiCube, clean: &HsiCube, b: usize) -> (f64, f64) {
        let (_, h, w) = clean.dims3().unwrap();
        let plane = h * w;
        let d: Vec<f64> = (b * plane..(b + 1) * plane).map(|i| noisy[i] - clean[i]).collect();
        let mean = d.iter().sum::<f64>() / plane as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (plane - 1) as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = cube(4, 8, 8);
        let spec = NoiseSpec {
            sigma_lo: 0.0,
            sigma_hi: 0.0,
            ..Default::default()
        };
        assert_eq!(add_noniid_gaussian(&x, &spec).unwrap(), x);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let x = cube(5, 16, 16);
        let spec = NoiseSpec {
            seed: 9,
            ..Default::default()
        };
        for kind in [NoiseKind::NoniidGaussian, NoiseKind::Mixture, NoiseKind::CorrVariance] {
            let s = NoiseSpec { kind, ..spec.clone() };
            assert_eq!(apply(&x, &s).unwrap(), apply(&x, &s).unwrap());
            assert_ne!(apply(&x, &s).unwrap(), apply(&x, &s.with_seed(10)).unwrap());
        }
    }

    #[test]
    fn band_std_matches_drawn_sigma() {
        let x = cube(31, 512, 512);
        let spec = NoiseSpec {
            seed: 3,
            ..Default::default()
        };
        let noisy = add_noniid_gaussian(&x, &spec).unwrap();
        let sig = band_sigmas(&spec, 31);
        for (b, &s) in sig.iter().enumerate() {
            let (mean, sd) = band_std(&noisy, &x, b);
            let want = s / 255.0;
            assert!((sd - want).abs() <= 0.05 * want, "band {b}: {sd} vs {want}");
            assert!(mean.abs() <= 3.0 * want / 512.0 + 1e-15, "band {b} mean {mean}");
        }
    }

    #[test]
    fn corr_profile_closed_form() {
        let b = 31;
        assert!((corr_sigma(15, b, 23.08, 0.157) - 23.08).abs() < 1e-12);
        let edge = 23.08 * (-0.25f64 / (4.0 * 0.157 * 0.157)).exp();
        assert!((corr_sigma(0, b, 23.08, 0.157) - edge).abs() < 1e-12);
        assert!((edge - 1.83).abs() < 0.01);
        for i in 0..b {
            assert!((corr_sigma(i, b, 23.08, 0.157) - corr_sigma(b - 1 - i, b, 23.08, 0.157)).abs() < 1e-12);
        }
        assert!(add_corr_variance(&cube(1, 4, 4), &NoiseSpec::default()).is_err());
    }

    #[test]
    fn mixture_partition_and_corruptions() {
        let spec = NoiseSpec {
            kind: NoiseKind::Mixture,
            seed: 5,
            ..Default::default()
        };
        for bands in [3, 10, 31] {
            let plan = plan_mixture(bands, 64, &spec).unwrap();
            let mut all: Vec<usize> = plan.impulse.iter().map(|p| p.0).collect();
            all.extend(plan.stripes.iter().map(|p| p.0));
            all.extend(plan.deadlines.iter().map(|p| p.0));
            all.sort_unstable();
            assert_eq!(all, (0..bands).collect::<Vec<_>>());
            for n in [plan.impulse.len(), plan.stripes.len(), plan.deadlines.len()] {
                assert!(n == bands / 3 || n == bands.div_ceil(3));
            }
        }
        assert!(plan_mixture(2, 8, &spec).is_err());

        let x = cube(9, 256, 256);
        let noisy = add_mixture(&x, &spec).unwrap();
        let plan = plan_mixture(9, 256, &spec).unwrap();
        let plane = 256 * 256;
        for (b, cols) in &plan.deadlines {
            for &c in cols {
                assert!((0..256).all(|r| noisy[b * plane + r * 256 + c] == 0.0));
            }
        }
        for &(b, ratio) in &plan.impulse {
            let sat = noisy.data()[b * plane..(b + 1) * plane]
                .iter()
                .filter(|&&v| v == 0.0 || v == 1.0)
                .count() as f64
                / plane as f64;
            assert!((sat - ratio).abs() < 0.02, "band {b}: {sat} vs {ratio}");
        }
        for (_, cols) in &plan.stripes {
            let frac = cols.len() as f64 / 256.0;
            assert!((0.045..=0.155).contains(&frac));
            assert!(cols.iter().all(|&(_, o)| o.abs() <= 0.25));
        }
    }

    #[test]
    fn config_round_trip_and_errors() {
        let spec = NoiseSpec {
            kind: NoiseKind::CorrVariance,
            sigma_hi: 55.0,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(NoiseSpec::parse_config(&spec.to_config()).unwrap(), spec);
        let parsed = NoiseSpec::parse_config("# comment\nkind = mixture\n\nsigma_hi=30 # trailing\n").unwrap();
        assert_eq!(parsed.kind, NoiseKind::Mixture);
        assert_eq!(parsed.sigma_hi, 30.0);
        assert!(matches!(
            NoiseSpec::parse_config("kind = mixture\nbogus = 1"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(NoiseSpec::parse_config("sigma_lo = 10\nsigma_hi = 5").is_err());
        assert!(NoiseSpec::parse_config("seed = -1").is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_eq!(a, derive_seed(1, 0, 0));
    }
}
