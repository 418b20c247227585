//! Loss, optimizer, patch sampling and the training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure_shape, Error, Result};
use crate::fixtures::rng;
use crate::metrics::psnr;
use crate::network::Ilrnet;
use crate::noise::{self, derive_seed, NoiseSpec};
use crate::tensor::{HsiCube, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub halve_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// `bands x height x width`.
    pub patch_shape: [usize; 3],
    pub patches_per_cube: usize,
    pub iterations_k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Draw fresh crops and noise every epoch. When off, epoch 0's draws are
    /// reused.
    pub resample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            halve_every_epochs: 20,
            epochs: 50,
            batch_size: 8,
            patch_shape: [31, 64, 64],
            patches_per_cube: 1,
            iterations_k: 9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            resample: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("halve_every_epochs", self.halve_every_epochs),
            ("batch_size", self.batch_size),
            ("patches_per_cube", self.patches_per_cube),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.patch_shape.contains(&0) {
            return Err(Error::invalid("patch extents must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("Adam needs betas in [0, 1) and a positive epsilon"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `lr0 · 0.5^floor(epoch / halve_every)`.
pub fn learning_rate_at(lr0: f64, halve_every: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}

/// `(1/2N)·Σ‖predᵢ − targetᵢ‖²` and its gradient `(predᵢ − targetᵢ)/N`.
pub fn frobenius_loss(preds: &[HsiCube], targets: &[HsiCube]) -> Result<(f64, Vec<HsiCube>)> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::invalid(format!(
            "loss needs matching non-empty batches, got {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let d = p.sub(t)?;
        loss += d.norm_sq();
        grads.push(d.scale(1.0 / n));
    }
    Ok((loss / (2.0 * n), grads))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[&Tensor], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: shapes.iter().map(|t| t.zeros_like()).collect(),
            v: shapes.iter().map(|t| t.zeros_like()).collect(),
        }
    }

    pub fn for_network(net: &Ilrnet, cfg: &TrainConfig) -> Self {
        let tensors: Vec<&Tensor> = net.tensors().into_iter().map(|(_, t)| t).collect();
        Self::new(&tensors, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    /// One update. Gradients are checked for finiteness before anything is
    /// modified.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[(String, &Tensor)], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (name, g)) in grads.iter().enumerate() {
            ensure_shape(self.m[i].shape(), g.shape())?;
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].1;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint Euclidean norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: Vec<&mut Tensor>, max: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub data: HsiCube,
    /// `(band, row, column)` of the patch origin in the source cube.
    pub offset: [usize; 3],
}

fn crop(cube: &HsiCube, offset: [usize; 3], shape: [usize; 3]) -> HsiCube {
    let (_, h, w) = cube.dims3().expect("cube");
    let [pb, ph, pw] = shape;
    let mut out = HsiCube::zeros(&shape);
    for b in 0..pb {
        for r in 0..ph {
            let src = ((offset[0] + b) * h + offset[1] + r) * w + offset[2];
            let dst = (b * ph + r) * pw;
            out.data_mut()[dst..dst + pw].copy_from_slice(&cube.data()[src..src + pw]);
        }
    }
    out
}

/// `count` crops at seeded uniform offsets along every axis.
pub fn extract_patches(cube: &HsiCube, shape: [usize; 3], count: usize, seed: u64) -> Result<Vec<Patch>> {
    let dims = cube.dims3()?;
    let dims = [dims.0, dims.1, dims.2];
    if (0..3).any(|a| dims[a] < shape[a]) {
        return Err(Error::invalid(format!(
            "cube {dims:?} is smaller than the patch {shape:?}"
        )));
    }
    let mut r = rng(seed);
    Ok((0..count)
        .map(|_| {
            let offset = [0, 1, 2].map(|a| r.random_range(0..=dims[a] - shape[a]));
            Patch {
                data: crop(cube, offset, shape),
                offset,
            }
        })
        .collect())
}

/// A training pair and where it came from.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub noisy: HsiCube,
    pub clean: HsiCube,
    pub source: usize,
    pub offset: [usize; 3],
    pub noise_seed: u64,
}

const SALT_CROP: u64 = 0xC0;
const SALT_NOISE: u64 = 0x70;
const SALT_ORDER: u64 = 0x0D;

/// The pairs used in `epoch`.
pub fn epoch_pairs(dataset: &[HsiCube], spec: &NoiseSpec, cfg: &TrainConfig, epoch: usize) -> Result<Vec<PatchPair>> {
    let e = if cfg.resample { epoch as u64 } else { 0 };
    let mut pairs = Vec::with_capacity(dataset.len() * cfg.patches_per_cube);
    for (ci, cube) in dataset.iter().enumerate() {
        let crop_seed = derive_seed(cfg.seed ^ SALT_CROP, e, ci as u64);
        for (pi, p) in extract_patches(cube, cfg.patch_shape, cfg.patches_per_cube, crop_seed)?
            .into_iter()
            .enumerate()
        {
            let idx = (ci * cfg.patches_per_cube + pi) as u64;
            let noise_seed = derive_seed(cfg.seed ^ spec.seed ^ SALT_NOISE, e, idx);
            pairs.push(PatchPair {
                noisy: noise::apply(&p.data, &spec.with_seed(noise_seed))?,
                clean: p.data,
                source: ci,
                offset: p.offset,
                noise_seed,
            });
        }
    }
    Ok(pairs)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean PSNR of the network output against the clean patches, measured
    /// during the epoch.
    pub train_psnr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:e}\t{:.8e}\t{:.4}", self.epoch, self.lr, self.mean_loss, self.train_psnr)
    }
}

/// Mean of finite PSNR values; infinite ones (exact reconstructions) are
/// capped at 100 dB so a single perfect patch does not swamp the mean.
fn mean_psnr(values: &[f64]) -> f64 {
    values.iter().map(|v| v.min(100.0)).sum::<f64>() / values.len() as f64
}

/// Trains `net` in place. `on_epoch` sees every log line as it is produced.
pub fn train(
    net: &mut Ilrnet,
    dataset: &[HsiCube],
    spec: &NoiseSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one cube"));
    }
    if cfg.iterations_k > net.iterations() {
        return Err(Error::invalid(format!(
            "training with {} refinement steps needs a network with at least that many, got {}",
            cfg.iterations_k,
            net.iterations()
        )));
    }
    let mut adam = Adam::for_network(net, cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = learning_rate_at(cfg.learning_rate, cfg.halve_every_epochs, epoch);
        let pairs = epoch_pairs(dataset, spec, cfg, epoch)?;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed ^ SALT_ORDER, epoch as u64, 0)));
        let (mut loss_sum, mut psnrs) = (0.0, Vec::with_capacity(pairs.len()));
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len() as f64;
            // Samples run in parallel; their contributions are summed in
            // batch order so the result does not depend on the thread count.
            let parts = batch
                .par_iter()
                .map(|&i| -> Result<(f64, f64, Ilrnet)> {
                    let pair = &pairs[i];
                    let (pred, cache) = net.forward_cached(&pair.noisy, cfg.iterations_k)?;
                    let diff = pred.sub(&pair.clean)?;
                    let p = psnr(&pred, &pair.clean, 1.0)?;
                    let (_, g) = net.backward(&cache, &diff.scale(1.0 / n))?;
                    Ok((diff.norm_sq() / (2.0 * n), p, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = net.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, p, g) in parts {
                batch_loss += loss;
                psnrs.push(p);
                for (acc, (_, part)) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.add_assign(part)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            loss_sum += batch_loss * n;
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(grads.tensors_mut(), max);
            }
            let named = grads.tensors();
            adam.step(net.tensors_mut(), &named, lr)?;
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / pairs.len() as f64,
            train_psnr: mean_psnr(&psnrs),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Mean PSNR of the noisy inputs and of the denoised outputs over a set of
/// clean cubes, each corrupted with a seed derived from `seed`.
pub fn evaluate_denoising(net: &Ilrnet, cubes: &[HsiCube], spec: &NoiseSpec, iterations: usize, seed: u64) -> Result<(f64, f64)> {
    let (mut noisy_sum, mut out_sum) = (0.0, 0.0);
    for (i, clean) in cubes.iter().enumerate() {
        let noisy = noise::apply(clean, &spec.with_seed(derive_seed(seed, i as u64, 0)))?;
        let out = net.forward(&noisy, iterations)?.0;
        noisy_sum += psnr(&noisy, clean, 1.0)?.min(100.0);
        out_sum += psnr(&out, clean, 1.0)?.min(100.0);
    }
    let n = cubes.len() as f64;
    Ok((noisy_sum / n, out_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{normal, uniform};
    use crate::layers::{grad_check, GradCheckConfig};
    use crate::network::NetworkConfig;

    #[test]
    fn loss_examples() {
        let t = Tensor::zeros(&[1, 2, 2]);
        let mut p = t.clone();
        assert_eq!(frobenius_loss(std::slice::from_ref(&p), std::slice::from_ref(&t)).unwrap().0, 0.0);
        p[3] = 2.0;
        let (l, g) = frobenius_loss(std::slice::from_ref(&p), std::slice::from_ref(&t)).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0, 2.0]);
        assert!(frobenius_loss(&[], &[]).is_err());
    }

    #[test]
    fn loss_gradient_is_exact() {
        let mut r = rng(120);
        let preds = vec![normal(&[2, 3, 3], &mut r), normal(&[2, 3, 3], &mut r)];
        let targets = vec![normal(&[2, 3, 3], &mut r), normal(&[2, 3, 3], &mut r)];
        let (_, g) = frobenius_loss(&preds, &targets).unwrap();
        let rep = grad_check(
            |v| frobenius_loss(&[v.clone(), preds[1].clone()], &targets).unwrap().0,
            &preds[0],
            &g[0],
            &GradCheckConfig::default(),
        );
        assert!(rep.passed(1e-8), "{rep:?}");
    }

    #[test]
    fn adam_examples() {
        let mut p = Tensor::full(&[4], 1.0);
        let zero = Tensor::zeros(&[4]);
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        adam.step(vec![&mut p], &[("p".into(), &zero)], 0.1).unwrap();
        assert_eq!(p, Tensor::full(&[4], 1.0));

        let mut p = Tensor::full(&[4], 1.0);
        let g = Tensor::full(&[4], 0.3);
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        adam.step(vec![&mut p], &[("p".into(), &g)], 0.01).unwrap();
        for &v in p.data() {
            let expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
            assert!((v - expected).abs() < 1e-15);
        }
        assert_eq!(adam.t, 1);

        let mut bad = Tensor::zeros(&[4]);
        bad[2] = f64::NAN;
        let err = adam.step(vec![&mut p], &[("coarse.enc0.bias".into(), &bad)], 0.01).unwrap_err();
        assert!(err.to_string().contains("coarse.enc0.bias"), "{err}");
    }

    #[test]
    fn schedule() {
        let lr = |e| learning_rate_at(1e-4, 20, e);
        assert_eq!(lr(0), 1e-4);
        assert_eq!(lr(19), 1e-4);
        assert_eq!(lr(20), 5e-5);
        assert_eq!(lr(39), 5e-5);
        assert_eq!(lr(40), 2.5e-5);
    }

    #[test]
    fn clipping() {
        let mut a = Tensor::full(&[1], 3.0);
        let mut b = Tensor::full(&[1], 4.0);
        assert_eq!(clip_global_norm(vec![&mut a, &mut b], 1.0), 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        let mut c = Tensor::full(&[1], 0.5);
        clip_global_norm(vec![&mut c], 1.0);
        assert_eq!(c[0], 0.5);
    }

    #[test]
    fn patches() {
        let cube = uniform(&[4, 8, 8], 0.0, 1.0, &mut rng(121));
        let full = extract_patches(&cube, [4, 8, 8], 3, 99).unwrap();
        assert!(full.iter().all(|p| p.data == cube && p.offset == [0, 0, 0]));
        let a = extract_patches(&cube, [2, 3, 5], 5, 7).unwrap();
        assert_eq!(a, extract_patches(&cube, [2, 3, 5], 5, 7).unwrap());
        let p = &a[0];
        let [b0, r0, c0] = p.offset;
        assert_eq!(p.data[0], cube[(b0 * 8 + r0) * 8 + c0]);
        assert!(extract_patches(&cube, [5, 2, 2], 1, 0).is_err());
    }

    #[test]
    fn patch_offsets_are_uniform() {
        let cube = Tensor::zeros(&[1, 1, 128]);
        let patches = extract_patches(&cube, [1, 1, 64], 10_000, 5).unwrap();
        let mut bins = [0usize; 65];
        for p in &patches {
            bins[p.offset[2]] += 1;
        }
        let expect = 10_000.0 / 65.0;
        let sd = (expect * (1.0 - 1.0 / 65.0f64)).sqrt();
        assert!(bins.iter().all(|&n| (n as f64 - expect).abs() <= 4.0 * sd), "{bins:?}");
    }

    fn tiny_setup() -> (Ilrnet, Vec<HsiCube>, NoiseSpec, TrainConfig) {
        let mut ncfg = NetworkConfig::micro(1);
        ncfg.lambda.window = 8;
        let net = Ilrnet::init(&ncfg, 3).unwrap();
        let data = vec![uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(122)), uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(123))];
        let spec = NoiseSpec {
            sigma_hi: 30.0,
            ..Default::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            patch_shape: [3, 8, 8],
            iterations_k: 1,
            ..Default::default()
        };
        (net, data, spec, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut net, data, spec, mut cfg) = tiny_setup();
        cfg.learning_rate = 0.0;
        cfg.epochs = 1;
        let before = net.clone();
        let log = train(&mut net, &data, &spec, &cfg, |_| {}).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let (net0, data, spec, cfg) = tiny_setup();
        let mut a = net0.clone();
        let mut b = net0.clone();
        let mut lines = Vec::new();
        let la = train(&mut a, &data, &spec, &cfg, |l| lines.push(l.to_string())).unwrap();
        let lb = train(&mut b, &data, &spec, &cfg, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(lines.len(), cfg.epochs);
        assert_eq!(lines[0].split('\t').count(), 4);
        assert_ne!(a, net0);
    }

    #[test]
    fn noise_resampling() {
        let (_, data, spec, mut cfg) = tiny_setup();
        let e0 = epoch_pairs(&data, &spec, &cfg, 0).unwrap();
        let e1 = epoch_pairs(&data, &spec, &cfg, 1).unwrap();
        assert_ne!(e0[0].noisy, e1[0].noisy);
        cfg.resample = false;
        let f0 = epoch_pairs(&data, &spec, &cfg, 0).unwrap();
        let f1 = epoch_pairs(&data, &spec, &cfg, 1).unwrap();
        assert_eq!(f0[0].noisy, f1[0].noisy);
    }
}
