//! The full denoiser: a coarse encoder/decoder estimate followed by a fixed
//! number of refinement steps. Each step blends the noisy input with the
//! current estimate using predicted per-band weights, runs a small
//! refinement net on the blend, and blends the result back with the
//! current estimate:
//!
//! ```text
//! λ₁ = Λ₁(X, Y)          Z  = (1 - λ₁)·Y + λ₁·X
//! λ₂ = Λ₂(X, Z)          X' = (1 - λ₂)·f_k(Z) + λ₂·X
//! ```

pub mod checkpoint;
pub mod lambda;
pub mod unet;

use crate::error::{ensure_shape, Error, Result};
use crate::fixtures::rng;
use crate::tensor::{HsiCube, Tensor};

pub use lambda::{LambdaCache, LambdaNet, LambdaNetConfig};
pub use unet::{UNet, UNetCache, UNetConfig};

pub const DEFAULT_ITERATIONS: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub coarse: UNetConfig,
    pub refine: UNetConfig,
    pub lambda: LambdaNetConfig,
    pub iterations: usize,
}

impl NetworkConfig {
    pub fn standard() -> Self {
        Self {
            coarse: UNetConfig {
                encoder: vec![16, 32, 64, 128],
                decoder: vec![64, 32, 16, 1],
                rmm_level: Some(0),
                residual: false,
            },
            refine: UNetConfig {
                encoder: vec![16, 32],
                decoder: vec![16, 1],
                rmm_level: None,
                residual: true,
            },
            lambda: LambdaNetConfig::default(),
            iterations: DEFAULT_ITERATIONS,
        }
    }

    /// All channel widths divided by four.
    pub fn micro(iterations: usize) -> Self {
        let quarter = |v: &[usize]| v.iter().map(|&c| (c / 4).max(1)).collect::<Vec<_>>();
        let s = Self::standard();
        Self {
            coarse: UNetConfig {
                encoder: quarter(&s.coarse.encoder),
                decoder: quarter(&s.coarse.decoder),
                ..s.coarse
            },
            refine: UNetConfig {
                encoder: quarter(&s.refine.encoder),
                decoder: quarter(&s.refine.decoder),
                ..s.refine
            },
            lambda: LambdaNetConfig {
                window: s.lambda.window,
                channels: quarter(&s.lambda.channels),
            },
            iterations,
        }
    }

    pub fn with_rmm(mut self, enabled: bool) -> Self {
        self.coarse.rmm_level = if enabled { Some(0) } else { None };
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ilrnet {
    pub coarse: UNet,
    /// One independent refinement net per step.
    pub refine: Vec<UNet>,
    pub lambda1: LambdaNet,
    pub lambda2: LambdaNet,
}

/// Estimate and blend after a refinement step.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementState {
    pub x: HsiCube,
    pub z: HsiCube,
    pub k: usize,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl RefinementState {
    /// The state right after the coarse estimate.
    pub fn initial(x0: HsiCube) -> Self {
        Self {
            z: x0.clone(),
            x: x0,
            k: 0,
            lambda1: Vec::new(),
            lambda2: Vec::new(),
        }
    }
}

/// `(1 - λ_b)·a + λ_b·b` band by band.
pub fn blend(a: &HsiCube, b: &HsiCube, lambda: &[f64]) -> Result<HsiCube> {
    ensure_shape(a.shape(), b.shape())?;
    let (bands, h, w) = a.dims3()?;
    if lambda.len() != bands {
        return Err(Error::ShapeMismatch {
            expected: vec![bands],
            found: vec![lambda.len()],
        });
    }
    let plane = h * w;
    let mut out = a.zeros_like();
    for (band, &l) in lambda.iter().enumerate() {
        let r = band * plane..(band + 1) * plane;
        for ((o, &p), &q) in out.data_mut()[r.clone()].iter_mut().zip(&a.data()[r.clone()]).zip(&b.data()[r]) {
            *o = (1.0 - l) * p + l * q;
        }
    }
    Ok(out)
}

/// Gradients of [`blend`]: `(∂/∂a, ∂/∂b, ∂/∂λ)`.
pub fn blend_backward(a: &HsiCube, b: &HsiCube, lambda: &[f64], g: &HsiCube) -> (HsiCube, HsiCube, Vec<f64>) {
    let plane = a.len() / lambda.len();
    let mut ga = a.zeros_like();
    let mut gb = a.zeros_like();
    let mut gl = vec![0.0; lambda.len()];
    for (band, &l) in lambda.iter().enumerate() {
        let r = band * plane..(band + 1) * plane;
        let mut acc = 0.0;
        for i in r {
            let gi = g[i];
            ga[i] = (1.0 - l) * gi;
            gb[i] = l * gi;
            acc += gi * (b[i] - a[i]);
        }
        gl[band] = acc;
    }
    (ga, gb, gl)
}

/// One refinement step with explicit weights.
pub fn refine_with_weights(
    x: &HsiCube,
    y: &HsiCube,
    f: &UNet,
    lambda1: &[f64],
    lambda2: &[f64],
) -> Result<(HsiCube, HsiCube)> {
    let z = blend(y, x, lambda1)?;
    let fz = f.forward(&z)?;
    let x_next = blend(&fz, x, lambda2)?;
    Ok((x_next, z))
}

#[derive(Clone, Debug)]
struct StepCache {
    x: HsiCube,
    fz: HsiCube,
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
    l1: LambdaCache,
    l2: LambdaCache,
    f: UNetCache,
}

/// Everything [`Ilrnet::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct IlrnetCache {
    y: HsiCube,
    coarse: UNetCache,
    steps: Vec<StepCache>,
}

fn accumulate(dst: Vec<&mut Tensor>, src: Vec<(String, &Tensor)>) -> Result<()> {
    for (d, (_, s)) in dst.into_iter().zip(src) {
        d.add_assign(s)?;
    }
    Ok(())
}

impl Ilrnet {
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        if cfg.refine.rmm_level.is_some() {
            return Err(Error::invalid("refinement nets carry no low-rank module"));
        }
        let mut r = rng(seed);
        let coarse = UNet::init(&cfg.coarse, &mut r)?;
        let refine = (0..cfg.iterations)
            .map(|_| UNet::init(&cfg.refine, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let lambda1 = LambdaNet::init(&cfg.lambda, &mut r)?;
        let lambda2 = LambdaNet::init(&cfg.lambda, &mut r)?;
        Ok(Self {
            coarse,
            refine,
            lambda1,
            lambda2,
        })
    }

    pub fn config(&self) -> NetworkConfig {
        let refine = self.refine.first().map(UNet::config).unwrap_or(UNetConfig {
            encoder: vec![],
            decoder: vec![],
            rmm_level: None,
            residual: true,
        });
        NetworkConfig {
            coarse: self.coarse.config(),
            refine,
            lambda: self.lambda1.config(),
            iterations: self.refine.len(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.refine.len()
    }

    /// Named parameters in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.coarse.tensors("coarse");
        for (k, f) in self.refine.iter().enumerate() {
            out.extend(f.tensors(&format!("refine{k}")));
        }
        out.extend(self.lambda1.tensors("lambda1"));
        out.extend(self.lambda2.tensors("lambda2"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.coarse.tensors_mut();
        for f in &mut self.refine {
            out.extend(f.tensors_mut());
        }
        out.extend(self.lambda1.tensors_mut());
        out.extend(self.lambda2.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn coarse_estimate(&self, y: &HsiCube) -> Result<HsiCube> {
        self.coarse.forward(y)
    }

    /// Weights from the first (`which == 1`) or second predictor.
    pub fn lambda_infer(&self, a: &HsiCube, b: &HsiCube, which: u8) -> Result<Vec<f64>> {
        match which {
            1 => self.lambda1.infer(a, b),
            2 => self.lambda2.infer(a, b),
            _ => Err(Error::invalid(format!("fusion-weight predictor index must be 1 or 2, got {which}"))),
        }
    }

    pub fn refine_step(&self, state: &RefinementState, y: &HsiCube) -> Result<RefinementState> {
        let f = self.refine.get(state.k).ok_or_else(|| {
            Error::invalid(format!(
                "step {} exceeds the {} trained refinement nets",
                state.k + 1,
                self.refine.len()
            ))
        })?;
        ensure_shape(y.shape(), state.x.shape())?;
        let lambda1 = self.lambda1.infer(&state.x, y)?;
        let z = blend(y, &state.x, &lambda1)?;
        let lambda2 = self.lambda2.infer(&state.x, &z)?;
        let x = blend(&f.forward(&z)?, &state.x, &lambda2)?;
        Ok(RefinementState {
            x,
            z,
            k: state.k + 1,
            lambda1,
            lambda2,
        })
    }

    /// Runs the coarse estimate and `iterations` refinement steps. Returns
    /// the final estimate and every intermediate estimate, starting with the
    /// coarse one.
    pub fn forward(&self, y: &HsiCube, iterations: usize) -> Result<(HsiCube, Vec<HsiCube>)> {
        self.check_iterations(iterations)?;
        let mut state = RefinementState::initial(self.coarse_estimate(y)?);
        let mut trace = vec![state.x.clone()];
        for _ in 0..iterations {
            state = self.refine_step(&state, y)?;
            trace.push(state.x.clone());
        }
        Ok((state.x, trace))
    }

    pub fn denoise(&self, y: &HsiCube) -> Result<HsiCube> {
        Ok(self.forward(y, self.iterations())?.0)
    }

    fn check_iterations(&self, iterations: usize) -> Result<()> {
        if iterations > self.refine.len() {
            return Err(Error::invalid(format!(
                "requested {iterations} refinement steps but the network has {}",
                self.refine.len()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, y: &HsiCube, iterations: usize) -> Result<(HsiCube, IlrnetCache)> {
        self.check_iterations(iterations)?;
        y.dims3()?;
        let (mut x, coarse) = self.coarse.forward_cached(y)?;
        let mut steps = Vec::with_capacity(iterations);
        for f in &self.refine[..iterations] {
            let (lambda1, l1) = self.lambda1.infer_cached(&x, y)?;
            let z = blend(y, &x, &lambda1)?;
            let (lambda2, l2) = self.lambda2.infer_cached(&x, &z)?;
            let (fz, fc) = f.forward_cached(&z)?;
            let next = blend(&fz, &x, &lambda2)?;
            steps.push(StepCache {
                x,
                fz,
                lambda1,
                lambda2,
                l1,
                l2,
                f: fc,
            });
            x = next;
        }
        Ok((
            x,
            IlrnetCache {
                y: y.clone(),
                coarse,
                steps,
            },
        ))
    }

    /// Returns `(∂L/∂y, ∂L/∂params)` given `∂L/∂output`.
    pub fn backward(&self, cache: &IlrnetCache, grad_out: &HsiCube) -> Result<(HsiCube, Ilrnet)> {
        ensure_shape(cache.y.shape(), grad_out.shape())?;
        let mut grads = self.zeros_like();
        let mut gy = cache.y.zeros_like();
        let mut gx = grad_out.clone();
        for (k, s) in cache.steps.iter().enumerate().rev() {
            let (g_fz, mut g_x, g_l2) = blend_backward(&s.fz, &s.x, &s.lambda2, &gx);
            let (mut g_z, fg) = self.refine[k].backward(&s.f, &g_fz)?;
            grads.refine[k] = fg;
            let (ga, gb, lg) = self.lambda2.backward(&s.l2, &g_l2)?;
            accumulate(grads.lambda2.tensors_mut(), lg.tensors(""))?;
            g_x.add_assign(&ga)?;
            g_z.add_assign(&gb)?;

            let (gy_part, gx_part, g_l1) = blend_backward(&cache.y, &s.x, &s.lambda1, &g_z);
            g_x.add_assign(&gx_part)?;
            gy.add_assign(&gy_part)?;
            let (ga, gb, lg) = self.lambda1.backward(&s.l1, &g_l1)?;
            accumulate(grads.lambda1.tensors_mut(), lg.tensors(""))?;
            g_x.add_assign(&ga)?;
            gy.add_assign(&gb)?;
            gx = g_x;
        }
        let (g0, cg) = self.coarse.backward(&cache.coarse, &gx)?;
        grads.coarse = cg;
        gy.add_assign(&g0)?;
        Ok((gy, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{normal, uniform};
    use crate::layers::{grad_check, GradCheckConfig};

    fn tiny(iterations: usize) -> Ilrnet {
        let mut cfg = NetworkConfig::micro(iterations);
        cfg.lambda.window = 12;
        Ilrnet::init(&cfg, 7).unwrap()
    }

    #[test]
    fn configs() {
        let s = NetworkConfig::standard();
        assert_eq!(s.iterations, 9);
        assert_eq!(s.coarse.encoder, vec![16, 32, 64, 128]);
        assert_eq!(s.coarse.decoder, vec![64, 32, 16, 1]);
        assert_eq!(s.lambda.window, 56);
        let m = NetworkConfig::micro(3);
        assert_eq!(m.coarse.encoder, vec![4, 8, 16, 32]);
        assert_eq!(m.coarse.decoder, vec![16, 8, 4, 1]);
        assert_eq!(m.refine.encoder, vec![4, 8]);
        assert_eq!(m.lambda.channels, vec![2, 4, 8]);
        let net = Ilrnet::init(&m, 1).unwrap();
        assert_eq!(net.config(), m);
    }

    #[test]
    fn forward_shapes_and_trace() {
        let net = tiny(2);
        let y = uniform(&[5, 16, 16], 0.0, 1.0, &mut rng(100));
        let (out, trace) = net.forward(&y, 2).unwrap();
        assert_eq!(out.shape(), y.shape());
        assert_eq!(trace.len(), 3);
        assert_eq!(trace[2], out);
        let (out0, trace0) = net.forward(&y, 0).unwrap();
        assert_eq!(out0, net.coarse_estimate(&y).unwrap());
        assert_eq!(trace0.len(), 1);
        assert!(net.forward(&y, 3).is_err());
    }

    #[test]
    fn standard_network_keeps_shape() {
        let net = Ilrnet::init(&NetworkConfig::standard(), 3).unwrap();
        let y = uniform(&[31, 64, 64], 0.0, 1.0, &mut rng(101));
        assert_eq!(net.coarse_estimate(&y).unwrap().shape(), &[31, 64, 64]);
    }

    #[test]
    fn zero_coarse_parameters_give_zero_estimate() {
        let mut net = tiny(1);
        net.coarse = net.coarse.zeros_like();
        let y = uniform(&[4, 16, 16], 0.0, 1.0, &mut rng(102));
        assert_eq!(net.coarse_estimate(&y).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let mut r = rng(103);
        let x = normal(&[3, 6, 5], &mut r);
        let y = normal(&[3, 6, 5], &mut r);
        let f = &tiny(1).refine[0];
        let (_, z) = refine_with_weights(&x, &y, f, &[0.0; 3], &[0.3; 3]).unwrap();
        assert_eq!(z, y);
        let (_, z) = refine_with_weights(&x, &y, f, &[1.0; 3], &[0.3; 3]).unwrap();
        assert_eq!(z, x);
        let (xn, _) = refine_with_weights(&x, &y, f, &[0.4; 3], &[1.0; 3]).unwrap();
        assert_eq!(xn, x);
    }

    #[test]
    fn blend_is_convex() {
        let mut r = rng(104);
        let net = tiny(1);
        let y = uniform(&[4, 16, 16], 0.0, 1.0, &mut r);
        let state = RefinementState::initial(net.coarse_estimate(&y).unwrap());
        let next = net.refine_step(&state, &y).unwrap();
        assert_eq!(next.k, 1);
        for i in 0..y.len() {
            let (lo, hi) = (y[i].min(state.x[i]), y[i].max(state.x[i]));
            assert!(next.z[i] >= lo && next.z[i] <= hi);
        }
        assert!(next.lambda1.iter().chain(&next.lambda2).all(|&l| l > 0.0 && l < 1.0));
    }

    #[test]
    fn lambda_index_checked() {
        let net = tiny(1);
        let y = Tensor::zeros(&[2, 8, 8]);
        assert!(net.lambda_infer(&y, &y, 3).is_err());
        assert_eq!(net.lambda_infer(&y, &y, 2).unwrap().len(), 2);
    }

    #[test]
    fn end_to_end_gradients() {
        let mut net = tiny(2);
        let mut r = rng(105);
        for t in net.tensors_mut() {
            if t.rank() == 1 && t.len() > 1 {
                *t = normal(t.shape(), &mut r).scale(0.05);
            }
        }
        let y = uniform(&[4, 16, 16], 0.0, 1.0, &mut r);
        let (out, cache) = net.forward_cached(&y, 2).unwrap();
        let probe = normal(out.shape(), &mut r);
        let (gy, grads) = net.backward(&cache, &probe).unwrap();
        let cfg = GradCheckConfig {
            samples: Some(12),
            step_levels: 3,
            ..Default::default()
        };
        let rep = grad_check(|v| net.forward(v, 2).unwrap().0.dot(&probe).unwrap(), &y, &gy, &cfg);
        assert!(rep.passed(1e-3), "input: {rep:?}");
        let gts: Vec<Tensor> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (k, (name, base)) in net.tensors().into_iter().enumerate() {
            let value = |v: &Tensor| {
                let mut n = net.clone();
                *n.tensors_mut()[k] = v.clone();
                n.forward(&y, 2).unwrap().0.dot(&probe).unwrap()
            };
            let rep = grad_check(value, base, &gts[k], &cfg);
            assert!(rep.passed(1e-3), "{name}: {rep:?}");
        }
    }
}
