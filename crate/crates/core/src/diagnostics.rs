//! Finite-difference gradient suites and the quick self-test, shared by the
//! `grad-check` and `self-test` commands and the acceptance tests.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fixtures::{geometric_spectrum, matrix_with_spectrum, normal, rng, uniform};
use crate::layers::{
    relu, relu_backward, sigmoid_backward, sigmoid_map, grad_check, Conv2d, Conv3d, Deconv3d, GradCheckConfig,
    GradCheckReport,
};
use crate::lowrank::{
    rmm_apply_with, rmm_backward, sigmoid, svt_adaptive_backward, svt_adaptive_forward_with, KernelMode,
    SvtOptions, ThresholdParam,
};
use crate::metrics::{psnr, sam, ssim};
use crate::network::{blend, blend_backward, Ilrnet, NetworkConfig};
use crate::svd::svd_thin;
use crate::tensor::Tensor;
use crate::wavelet::{dwt2_haar, dwt_backward, idwt2_haar, idwt_backward, WaveletQuad};

/// Default tolerance for single-module checks.
pub const MODULE_TOLERANCE: f64 = 1e-4;
/// Default tolerance for the end-to-end network check.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Rmm,
    Layers,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Rmm, Suite::Layers, Suite::Network];

    pub fn default_tolerance(self) -> f64 {
        match self {
            Suite::Network => NETWORK_TOLERANCE,
            _ => MODULE_TOLERANCE,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmm" => Ok(Suite::Rmm),
            "layers" => Ok(Suite::Layers),
            "network" => Ok(Suite::Network),
            _ => Err(Error::invalid(format!("unknown suite {s:?} (expected rmm, layers or network)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Rmm => "rmm",
            Suite::Layers => "layers",
            Suite::Network => "network",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: max rel error {:.3e} over {} coordinates (tolerance {:.0e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.report.max_rel_error,
            self.report.checked,
            self.tolerance
        )
    }
}

struct Collector {
    tolerance: f64,
    results: Vec<CheckResult>,
}

impl Collector {
    fn push(&mut self, name: impl Into<String>, report: GradCheckReport) {
        self.results.push(CheckResult {
            name: name.into(),
            report,
            tolerance: self.tolerance,
        });
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::full(&[1], v)
}

/// Runs one suite. `tolerance` overrides the suite default.
pub fn run_suite(suite: Suite, tolerance: Option<f64>) -> Result<Vec<CheckResult>> {
    let mut c = Collector {
        tolerance: tolerance.unwrap_or(suite.default_tolerance()),
        results: Vec::new(),
    };
    match suite {
        Suite::Rmm => rmm_suite(&mut c)?,
        Suite::Layers => layer_suite(&mut c)?,
        Suite::Network => network_suite(&mut c)?,
    }
    Ok(c.results)
}

fn svt_case(c: &mut Collector, name: &str, w: &Tensor, d: f64, opts: SvtOptions, seed: u64) -> Result<()> {
    let (rows, cols) = w.dims2()?;
    let probe = normal(&[rows, cols], &mut rng(seed));
    let (_, cache) = svt_adaptive_forward_with(w, ThresholdParam::new(d), opts)?;
    let (gw, gd) = svt_adaptive_backward(&cache, &probe)?;
    let value = |w: &Tensor, d: f64| {
        svt_adaptive_forward_with(w, ThresholdParam::new(d), opts)
            .map(|(out, _)| out.dot(&probe).unwrap())
            .unwrap_or(f64::NAN)
    };
    let cfg = GradCheckConfig::default();
    c.push(format!("{name} d={d} dW"), grad_check(|v| value(v, d), w, &gw, &cfg));
    c.push(format!("{name} d={d} dd"), grad_check(|v| value(w, v[0]), &scalar(d), &scalar(gd), &cfg));
    Ok(())
}

fn rmm_suite(c: &mut Collector) -> Result<()> {
    let mut r = rng(0x5EED_0001);
    // Well separated spectra: the truncated-series kernel is accurate to
    // ratio^10 of the exact one.
    for (rows, cols) in [(6, 12), (12, 6), (6, 6)] {
        let w = matrix_with_spectrum(rows, cols, &geometric_spectrum(rows.min(cols), 9.0, 0.25), &mut r);
        for d in [0.0, -1.5, -4.0] {
            svt_case(c, &format!("svt {rows}x{cols}"), &w, d, SvtOptions::default(), 11)?;
        }
    }
    // Gaps down to 1e-3·σ₁ with the exact kernel.
    let exact = SvtOptions {
        kernel: KernelMode::Exact,
        ..Default::default()
    };
    let w = matrix_with_spectrum(4, 9, &[4.0, 3.0, 2.996, 1.0], &mut r);
    svt_case(c, "svt exact-kernel gap 1e-3", &w, -6.0, exact, 12)?;

    // The full module on a feature map whose LL matrices have separated
    // spectra. At ratio 0.3 the truncated kernel's bias already reaches
    // about 1e-4 in the input gradient.
    let (ch, b, h, w) = (2, 6, 8, 8);
    let per = b * (h / 2) * (w / 2);
    let mut quad = WaveletQuad::zeros(&[ch, b, h / 2, w / 2]);
    for k in 0..ch {
        let m = matrix_with_spectrum(b, (h / 2) * (w / 2), &geometric_spectrum(b, 8.0, 0.2), &mut r);
        quad.ll.data_mut()[k * per..(k + 1) * per].copy_from_slice(m.data());
    }
    for band in [&mut quad.lh, &mut quad.hl, &mut quad.hh] {
        *band = normal(band.shape(), &mut r).scale(0.5);
    }
    let x = idwt2_haar(&quad)?;
    let probe = normal(x.shape(), &mut r);
    let opts = SvtOptions::default();
    for d in [0.0, -2.0] {
        let (_, cache) = rmm_apply_with(&x, ThresholdParam::new(d), opts)?;
        let (gx, gd) = rmm_backward(&cache, &probe)?;
        let value = |x: &Tensor, d: f64| {
            rmm_apply_with(x, ThresholdParam::new(d), opts)
                .map(|(y, _)| y.dot(&probe).unwrap())
                .unwrap_or(f64::NAN)
        };
        let cfg = GradCheckConfig::default();
        c.push(format!("rmm d={d} dX"), grad_check(|v| value(v, d), &x, &gx, &cfg));
        c.push(format!("rmm d={d} dd"), grad_check(|v| value(&x, v[0]), &scalar(d), &scalar(gd), &cfg));
    }
    Ok(())
}

/// Checks input, weight and bias gradients of a conv-type layer under the
/// loss `⟨probe, layer(x)⟩`.
fn conv_case<L: Clone>(
    c: &mut Collector,
    name: &str,
    layer: &L,
    x: &Tensor,
    forward: impl Fn(&L, &Tensor) -> Tensor,
    backward: impl Fn(&L, &Tensor, &Tensor) -> crate::layers::ConvGrads,
    weight: impl Fn(&mut L) -> &mut Tensor,
    bias: impl Fn(&mut L) -> &mut Tensor,
    seed: u64,
) {
    let y = forward(layer, x);
    let probe = normal(y.shape(), &mut rng(seed));
    let g = backward(layer, x, &probe);
    let cfg = GradCheckConfig::default();
    c.push(
        format!("{name} input"),
        grad_check(|v| forward(layer, v).dot(&probe).unwrap(), x, &g.input, &cfg),
    );
    let mut l = layer.clone();
    let w0 = weight(&mut l).clone();
    c.push(
        format!("{name} weight"),
        grad_check(
            |v| {
                let mut l = layer.clone();
                *weight(&mut l) = v.clone();
                forward(&l, x).dot(&probe).unwrap()
            },
            &w0,
            &g.weight,
            &cfg,
        ),
    );
    let b0 = bias(&mut l).clone();
    c.push(
        format!("{name} bias"),
        grad_check(
            |v| {
                let mut l = layer.clone();
                *bias(&mut l) = v.clone();
                forward(&l, x).dot(&probe).unwrap()
            },
            &b0,
            &g.bias,
            &cfg,
        ),
    );
}

fn layer_suite(c: &mut Collector) -> Result<()> {
    let mut r = rng(0x5EED_0002);
    let cfg = GradCheckConfig::default();

    for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([1, 2, 2], [1, 1, 1]), ([2, 1, 2], [0, 1, 0])] {
        let mut conv = Conv3d::init(2, 3, [3, 3, 3], stride, pad, &mut r);
        conv.bias = normal(&[3], &mut r);
        let x = normal(&[2, 4, 6, 6], &mut r);
        conv_case(
            c,
            &format!("conv3d stride {stride:?}"),
            &conv,
            &x,
            |l, x| l.forward(x).unwrap(),
            |l, x, g| l.backward(x, g).unwrap(),
            |l| &mut l.weight,
            |l| &mut l.bias,
            21,
        );
    }

    for (stride, out_pad) in [([1, 1, 1], [0, 0, 0]), ([1, 2, 2], [0, 1, 1])] {
        let mut de = Deconv3d::init(3, 2, [3, 3, 3], stride, [1, 1, 1], out_pad, &mut r);
        de.bias = normal(&[2], &mut r);
        let x = normal(&[3, 4, 3, 3], &mut r);
        conv_case(
            c,
            &format!("deconv3d stride {stride:?}"),
            &de,
            &x,
            |l, x| l.forward(x).unwrap(),
            |l, x, g| l.backward(x, g).unwrap(),
            |l| &mut l.weight,
            |l| &mut l.bias,
            22,
        );
    }

    let mut conv2 = Conv2d::init(2, 3, [3, 3], [2, 2], [1, 1], &mut r);
    conv2.bias = normal(&[3], &mut r);
    let x = normal(&[2, 2, 7, 6], &mut r);
    conv_case(
        c,
        "conv2d stride [2, 2]",
        &conv2,
        &x,
        |l, x| l.forward(x).unwrap(),
        |l, x, g| l.backward(x, g).unwrap(),
        |l| &mut l.weight,
        |l| &mut l.bias,
        23,
    );

    // Keep inputs away from the kink so every difference quotient is clean.
    let x = normal(&[3, 4, 5], &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let probe = normal(x.shape(), &mut r);
    let g = relu_backward(&x, &probe)?;
    c.push("relu", grad_check(|v| relu(v).dot(&probe).unwrap(), &x, &g, &cfg));

    let y = sigmoid_map(&x);
    let g = sigmoid_backward(&y, &probe)?;
    c.push("sigmoid", grad_check(|v| sigmoid_map(v).dot(&probe).unwrap(), &x, &g, &cfg));

    let feat = normal(&[2, 3, 4, 6], &mut r);
    let quad_probe = dwt2_haar(&normal(&[2, 3, 4, 6], &mut r))?;
    let g = dwt_backward(&quad_probe)?;
    c.push(
        "haar analysis",
        grad_check(|v| dwt2_haar(v).unwrap().dot(&quad_probe).unwrap(), &feat, &g, &cfg),
    );
    let probe = normal(feat.shape(), &mut r);
    let gq = idwt_backward(&probe)?;
    let q = dwt2_haar(&feat)?;
    let ll_value = |v: &Tensor| {
        let mut q = q.clone();
        q.ll = v.clone();
        idwt2_haar(&q).unwrap().dot(&probe).unwrap()
    };
    c.push("haar synthesis", grad_check(ll_value, &q.ll, &gq.ll, &cfg));

    let a = normal(&[3, 4, 4], &mut r);
    let b = normal(&[3, 4, 4], &mut r);
    let lam = Tensor::new(&[3], vec![0.2, 0.5, 0.9])?;
    let probe = normal(a.shape(), &mut r);
    let (ga, gb, gl) = blend_backward(&a, &b, lam.data(), &probe);
    let f = |a: &Tensor, b: &Tensor, l: &Tensor| blend(a, b, l.data()).unwrap().dot(&probe).unwrap();
    c.push("blend a", grad_check(|v| f(v, &b, &lam), &a, &ga, &cfg));
    c.push("blend b", grad_check(|v| f(&a, v, &lam), &b, &gb, &cfg));
    c.push("blend weights", grad_check(|v| f(&a, &b, v), &lam, &Tensor::new(&[3], gl)?, &cfg));
    Ok(())
}

/// The micro network used by the end-to-end check: small fusion window,
/// two refinement steps, randomised biases so no unit sits idle.
pub fn gradient_test_network(seed: u64) -> Result<Ilrnet> {
    let mut cfg = NetworkConfig::micro(2);
    cfg.lambda.window = 12;
    let mut net = Ilrnet::init(&cfg, seed)?;
    let mut r = rng(seed ^ 0xB1A5);
    for t in net.tensors_mut() {
        if t.rank() == 1 && t.len() > 1 {
            *t = normal(t.shape(), &mut r).scale(0.05);
        }
    }
    Ok(net)
}

fn network_suite(c: &mut Collector) -> Result<()> {
    const K: usize = 2;
    let net = gradient_test_network(7)?;
    let mut r = rng(0x5EED_0003);
    let y = uniform(&[8, 16, 16], 0.0, 1.0, &mut r);
    let (out, cache) = net.forward_cached(&y, K)?;
    let probe = normal(out.shape(), &mut r);
    let (gy, grads) = net.backward(&cache, &probe)?;
    // Deep ReLU stacks put kinks within reach of some probes; the best of
    // three step sizes is kept per coordinate.
    let cfg = GradCheckConfig {
        samples: Some(12),
        step_levels: 3,
        ..Default::default()
    };
    let value = |n: &Ilrnet, y: &Tensor| n.forward(y, K).map(|o| o.0.dot(&probe).unwrap()).unwrap_or(f64::NAN);
    c.push("network input", grad_check(|v| value(&net, v), &y, &gy, &cfg));
    let gts: Vec<Tensor> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for (k, (name, base)) in net.tensors().into_iter().enumerate() {
        let rep = grad_check(
            |v| {
                let mut n = net.clone();
                *n.tensors_mut()[k] = v.clone();
                value(&n, &y)
            },
            base,
            &gts[k],
            &cfg,
        );
        c.push(format!("network {name}"), rep);
    }
    Ok(())
}

/// One line of the self-test.
#[derive(Clone, Debug)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SelfCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "ok  " } else { "FAIL" }, self.name, self.detail)
    }
}

/// Wavelet reconstruction, the SVT against a direct rebuild, and the metric
/// identities. Takes well under a second.
pub fn self_test() -> Result<Vec<SelfCheck>> {
    let mut r = rng(0x5E1F);
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let shape = [
            r_usize(&mut r, 1, 4),
            r_usize(&mut r, 1, 8),
            2 * r_usize(&mut r, 1, 16),
            2 * r_usize(&mut r, 1, 16),
        ];
        let x = normal(&shape, &mut r);
        worst = worst.max(idwt2_haar(&dwt2_haar(&x)?)?.max_abs_diff(&x)?);
    }
    out.push(SelfCheck {
        name: "wavelet reconstruction",
        passed: worst <= 1e-12,
        detail: format!("max error {worst:.3e}"),
    });

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (m, n) = (r_usize(&mut r, 1, 16), r_usize(&mut r, 1, 64));
        let w = normal(&[m, n], &mut r);
        let d = uniform(&[1], -6.0, 2.0, &mut r)[0];
        let got = svt_adaptive_forward_with(&w, ThresholdParam::new(d), SvtOptions::default())?.0;
        let f = svd_thin(&w)?;
        let t = sigmoid(d) * f.sigma[0];
        let mut want = Tensor::zeros(&[m, n]);
        for (k, &s) in f.sigma.iter().enumerate() {
            let s = (s - t).max(0.0);
            for i in 0..m {
                for j in 0..n {
                    want[i * n + j] += f.u[i * f.sigma.len() + k] * s * f.v[j * f.sigma.len() + k];
                }
            }
        }
        worst = worst.max(got.max_abs_diff(&want)?);
    }
    out.push(SelfCheck {
        name: "svt against direct rebuild",
        passed: worst <= 1e-9,
        detail: format!("max error {worst:.3e}"),
    });

    let x = uniform(&[3, 16, 16], 0.0, 0.9, &mut r);
    let p_same = psnr(&x, &x, 1.0)?;
    let p_off = psnr(&x.map(|v| v + 0.1), &x, 1.0)?;
    let s_same = ssim(&x, &x)?;
    let e1 = Tensor::new(&[2, 1, 1], vec![1.0, 0.0])?;
    let e2 = Tensor::new(&[2, 1, 1], vec![0.0, 1.0])?;
    let angle = sam(&e1, &e2)?;
    out.push(SelfCheck {
        name: "metric identities",
        passed: p_same.is_infinite()
            && (p_off - 20.0).abs() <= 1e-6
            && (s_same - 1.0).abs() <= 1e-12
            && (angle - std::f64::consts::FRAC_PI_2).abs() <= 1e-9,
        detail: format!("psnr(x,x)={p_same} psnr(+0.1)={p_off:.6} ssim(x,x)={s_same:.6} sam(e1,e2)={angle:.9}"),
    });
    Ok(out)
}

fn r_usize(r: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize) -> usize {
    use rand::Rng;
    r.random_range(lo..=hi)
}
