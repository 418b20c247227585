//! Encoder/decoder network over `bands x height x width` cubes.
//!
//! Every encoder level is a 3x3x3 convolution with spatial stride 2 followed
//! by ReLU. Every decoder level is a 3x3x3 transposed convolution with
//! spatial stride 2; all but the last add the encoder output of the same
//! scale and apply ReLU. An optional low-rank module sits after one decoder
//! level. Inputs are reflect-padded to a multiple of `2^levels` and cropped
//! back afterwards.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{relu, relu_backward, Conv3d, Deconv3d, SpatialMap};
use crate::lowrank::{rmm_apply_with, rmm_backward, RmmCache, SvtOptions, ThresholdParam, D_INIT};
use crate::tensor::{HsiCube, Tensor};

pub const KERNEL: [usize; 3] = [3, 3, 3];
pub const STRIDE: [usize; 3] = [1, 2, 2];
pub const PADDING: [usize; 3] = [1, 1, 1];
pub const OUTPUT_PADDING: [usize; 3] = [0, 1, 1];

/// Channel layout of a [`UNet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub encoder: Vec<usize>,
    /// Must mirror `encoder` and end in 1.
    pub decoder: Vec<usize>,
    /// Decoder level followed by the low-rank module.
    pub rmm_level: Option<usize>,
    /// Add the input to the output.
    pub residual: bool,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.encoder.len();
        let ok = l >= 1
            && self.decoder.len() == l
            && self.decoder[l - 1] == 1
            && (0..l - 1).all(|j| self.decoder[j] == self.encoder[l - 2 - j])
            && self.encoder.iter().all(|&c| c > 0);
        if !ok {
            return Err(Error::invalid(format!(
                "decoder ladder {:?} does not mirror encoder ladder {:?}",
                self.decoder, self.encoder
            )));
        }
        if let Some(level) = self.rmm_level {
            if level + 1 >= l {
                return Err(Error::invalid(format!(
                    "low-rank module level {level} must precede the output layer (levels: {l})"
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.encoder.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub enc: Vec<Conv3d>,
    pub dec: Vec<Deconv3d>,
    /// `(decoder level, d)`; `d` is stored as a one-element tensor.
    pub rmm: Option<(usize, Tensor)>,
    pub residual: bool,
    pub svt: SvtOptions,
}

/// Activations kept for [`UNet::backward`].
#[derive(Clone, Debug)]
pub struct UNetCache {
    pad: SpatialMap,
    crop: SpatialMap,
    enc_in: Vec<Tensor>,
    enc_out: Vec<Tensor>,
    dec_in: Vec<Tensor>,
    /// ReLU outputs of the non-final decoder levels.
    dec_act: Vec<Tensor>,
    rmm: Option<RmmCache>,
    bands: usize,
}

impl UNet {
    pub fn init(cfg: &UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::new();
        let mut prev = 1;
        for &c in &cfg.encoder {
            enc.push(Conv3d::init(prev, c, KERNEL, STRIDE, PADDING, rng));
            prev = c;
        }
        let mut dec = Vec::new();
        for &c in &cfg.decoder {
            dec.push(Deconv3d::init(prev, c, KERNEL, STRIDE, PADDING, OUTPUT_PADDING, rng));
            prev = c;
        }
        Ok(Self {
            enc,
            dec,
            rmm: cfg.rmm_level.map(|l| (l, Tensor::full(&[1], D_INIT))),
            residual: cfg.residual,
            svt: SvtOptions::default(),
        })
    }

    pub fn config(&self) -> UNetConfig {
        UNetConfig {
            encoder: self.enc.iter().map(|c| c.out_channels()).collect(),
            decoder: self.dec.iter().map(|c| c.out_channels()).collect(),
            rmm_level: self.rmm.as_ref().map(|(l, _)| *l),
            residual: self.residual,
        }
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    /// Spatial extents are padded up to a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << self.levels()
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            out.push((format!("{prefix}.enc{i}.weight"), &c.weight));
            out.push((format!("{prefix}.enc{i}.bias"), &c.bias));
        }
        for (j, c) in self.dec.iter().enumerate() {
            out.push((format!("{prefix}.dec{j}.weight"), &c.weight));
            out.push((format!("{prefix}.dec{j}.bias"), &c.bias));
        }
        if let Some((level, d)) = &self.rmm {
            out.push((format!("{prefix}.dec{level}.rmm_d"), d));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.enc {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in &mut self.dec {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        if let Some((_, d)) = &mut self.rmm {
            out.push(d);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn threshold(&self) -> Option<ThresholdParam> {
        self.rmm.as_ref().map(|(_, d)| ThresholdParam::new(d[0]))
    }

    pub fn forward(&self, x: &HsiCube) -> Result<HsiCube> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &HsiCube) -> Result<(HsiCube, UNetCache)> {
        let (b, h, w) = x.dims3()?;
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("empty cube {:?}", x.shape())));
        }
        let pad = SpatialMap::pad_to_multiple(h, w, self.multiple());
        let (ph, pw) = pad.output_extents();
        let crop = SpatialMap::crop(ph, pw, h, w)?;
        let input = pad.apply(&x.clone().reshape(&[1, b, h, w])?)?;

        let l = self.levels();
        let mut enc_in = Vec::with_capacity(l);
        let mut enc_out: Vec<Tensor> = Vec::with_capacity(l);
        let mut cur = input;
        for conv in &self.enc {
            let out = relu(&conv.forward(&cur)?);
            enc_in.push(cur);
            enc_out.push(out.clone());
            cur = out;
        }

        let mut dec_in = Vec::with_capacity(l);
        let mut dec_act = Vec::with_capacity(l - 1);
        let mut rmm_cache = None;
        for (j, deconv) in self.dec.iter().enumerate() {
            let mut z = deconv.forward(&cur)?;
            dec_in.push(cur);
            if j + 1 < l {
                z.add_assign(&enc_out[l - 2 - j])?;
                let act = relu(&z);
                cur = match &self.rmm {
                    Some((level, d)) if *level == j => {
                        let (out, cache) = rmm_apply_with(&act, ThresholdParam::new(d[0]), self.svt)?;
                        rmm_cache = Some(cache);
                        out
                    }
                    _ => act.clone(),
                };
                dec_act.push(act);
            } else {
                cur = z;
            }
        }
        let mut out = crop.apply(&cur)?.reshape(&[b, h, w])?;
        if self.residual {
            out.add_assign(x)?;
        }
        Ok((
            out,
            UNetCache {
                pad,
                crop,
                enc_in,
                enc_out,
                dec_in,
                dec_act,
                rmm: rmm_cache,
                bands: b,
            },
        ))
    }

    /// Returns `(∂L/∂x, ∂L/∂params)`; the parameter gradient has the layout
    /// of `self`.
    pub fn backward(&self, cache: &UNetCache, grad_out: &HsiCube) -> Result<(HsiCube, UNet)> {
        let l = self.levels();
        let (b, h, w) = grad_out.dims3()?;
        if b != cache.bands {
            return Err(Error::invalid("unet gradient does not match the cached forward pass"));
        }
        let mut grads = self.zeros_like();
        let mut skip_grad: Vec<Option<Tensor>> = vec![None; l];

        let mut g = cache.crop.adjoint(&grad_out.clone().reshape(&[1, b, h, w])?)?;
        for j in (0..l).rev() {
            let gz = if j + 1 < l {
                if let (Some((level, _)), Some(rc)) = (&self.rmm, &cache.rmm) {
                    if *level == j {
                        let (gi, gd) = rmm_backward(rc, &g)?;
                        if let Some((_, gdt)) = &mut grads.rmm {
                            gdt[0] = gd;
                        }
                        g = gi;
                    }
                }
                let gz = relu_backward(&cache.dec_act[j], &g)?;
                skip_grad[l - 2 - j] = Some(gz.clone());
                gz
            } else {
                g
            };
            let cg = self.dec[j].backward(&cache.dec_in[j], &gz)?;
            grads.dec[j].weight = cg.weight;
            grads.dec[j].bias = cg.bias;
            g = cg.input;
        }
        for i in (0..l).rev() {
            if let Some(s) = &skip_grad[i] {
                g.add_assign(s)?;
            }
            let gz = relu_backward(&cache.enc_out[i], &g)?;
            let cg = self.enc[i].backward(&cache.enc_in[i], &gz)?;
            grads.enc[i].weight = cg.weight;
            grads.enc[i].bias = cg.bias;
            g = cg.input;
        }
        let mut gx = cache.pad.adjoint(&g)?.reshape(&[b, h, w])?;
        if self.residual {
            gx.add_assign(grad_out)?;
        }
        Ok((gx, grads))
    }
}
