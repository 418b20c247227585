//! Central-difference gradient checking.

use rand::seq::index::sample;

use crate::fixtures::rng;
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative.
///
/// The denominator is floored at `1e-3 * scale` so that entries which are
/// tiny compared with the rest of the gradient are judged on an absolute
/// basis instead of amplifying rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / denominator(analytic, numeric, scale)
}

fn denominator(analytic: f64, numeric: f64, scale: f64) -> f64 {
    analytic.abs().max(numeric.abs()).max(1e-3 * scale.abs()).max(1e-12)
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Number of step sizes tried per coordinate: `step`, `step/10`, ...
    /// The best agreement counts. A ReLU kink within reach of one step
    /// corrupts that quotient only, while a wrong analytic value disagrees
    /// at every step.
    pub step_levels: usize,
    /// Coordinates to probe; `None` probes every coordinate.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            step_levels: 1,
            samples: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tolerance
    }

    /// Combines two reports, keeping the worse entry.
    pub fn merge(mut self, other: &GradCheckReport) -> Self {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = other.worst_index;
            self.worst_analytic = other.worst_analytic;
            self.worst_numeric = other.worst_numeric;
        }
        self
    }
}

/// Compares `analytic` against central differences of the scalar function
/// `value` around `x`.
pub fn grad_check(
    value: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match the point");
    let scale = analytic.max_abs();
    let coords: Vec<usize> = match cfg.samples {
        Some(k) if k < x.len() => {
            let mut idx = sample(&mut rng(cfg.seed), x.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x.len()).collect(),
    };
    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for &i in &coords {
        let orig = probe[i];
        let (mut err, mut numeric) = (f64::INFINITY, f64::NAN);
        for level in 0..cfg.step_levels.max(1) {
            let h = cfg.step / 10f64.powi(level as i32);
            probe[i] = orig + h;
            let fp = value(&probe);
            probe[i] = orig - h;
            let fm = value(&probe);
            probe[i] = orig;
            let n = (fp - fm) / (2.0 * h);
            // Differences below the rounding noise of the difference
            // quotient carry no information.
            let noise = 8.0 * f64::EPSILON * fp.abs().max(fm.abs()) / h;
            let excess = ((analytic[i] - n).abs() - noise).max(0.0);
            let e = excess / denominator(analytic[i], n, scale);
            if !(e >= err) {
                err = e;
                numeric = n;
            }
        }
        report.checked += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = x.scale(2.0);
        let rep = grad_check(|v| v.norm_sq(), &x, &g, &GradCheckConfig::default());
        assert_eq!(rep.checked, 3);
        assert!(rep.passed(1e-8), "{rep:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let g = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let rep = grad_check(|v| v.norm_sq(), &x, &g, &GradCheckConfig::default());
        assert!(!rep.passed(1e-2));
        assert_eq!(rep.worst_index, Some(1));
    }

    #[test]
    fn noise_allowance_does_not_hide_small_errors() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let f = |v: &Tensor| v.data().iter().map(|t| t.sin()).sum::<f64>();
        let exact = x.map(f64::cos);
        let cfg = GradCheckConfig {
            step_levels: 3,
            ..Default::default()
        };
        assert!(grad_check(f, &x, &exact, &cfg).max_rel_error < 1e-8);
        let off = exact.map(|g| g * (1.0 + 1e-3));
        let rep = grad_check(f, &x, &off, &cfg);
        assert!(rep.max_rel_error > 5e-4 && !rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn sampling_limits_probes() {
        let x = Tensor::zeros(&[50]);
        let cfg = GradCheckConfig {
            samples: Some(7),
            ..Default::default()
        };
        let rep = grad_check(|v| v.sum(), &x, &Tensor::full(&[50], 1.0), &cfg);
        assert_eq!(rep.checked, 7);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1.0), 0.0);
        assert!(relative_error(1e-9, 2e-9, 1.0) < 1e-5);
        assert!(relative_error(1.0, 1.1, 1.0) > 0.05);
    }
}
