//! Per-band fusion-weight predictor.
//!
//! Two cubes are stacked as channels, a centred square window is taken from
//! every band, and a small stack of stride-2 3x3 convolutions (shared across
//! bands) is applied. The last feature map is averaged over channels and
//! space per band and squashed by a sigmoid, giving one weight in (0, 1) per
//! band.

use rand::Rng;

use crate::error::{ensure_shape, Error, Result};
use crate::layers::{relu, relu_backward, sigmoid_backward, sigmoid_map, Conv3d, SpatialMap};
use crate::tensor::{HsiCube, Tensor};

pub const WINDOW: usize = 56;
pub(crate) const KERNEL: [usize; 3] = [1, 3, 3];
pub(crate) const STRIDE: [usize; 3] = [1, 2, 2];
pub(crate) const PADDING: [usize; 3] = [0, 1, 1];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LambdaNetConfig {
    pub window: usize,
    /// Output widths of the convolutions; the input has two channels.
    pub channels: Vec<usize>,
}

impl Default for LambdaNetConfig {
    fn default() -> Self {
        Self {
            window: WINDOW,
            channels: vec![8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaNet {
    pub convs: Vec<Conv3d>,
    pub window: usize,
}

#[derive(Clone, Debug)]
pub struct LambdaCache {
    window: SpatialMap,
    inputs: Vec<Tensor>,
    /// ReLU outputs of all but the last convolution.
    acts: Vec<Tensor>,
    last_shape: Vec<usize>,
    weights: Tensor,
    shape: [usize; 3],
}

impl LambdaNet {
    pub fn init(cfg: &LambdaNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.window == 0 || cfg.channels.contains(&0) {
            return Err(Error::invalid(format!("invalid fusion-weight net config {cfg:?}")));
        }
        let mut prev = 2;
        let convs = cfg
            .channels
            .iter()
            .map(|&c| {
                let conv = Conv3d::init(prev, c, KERNEL, STRIDE, PADDING, rng);
                prev = c;
                conv
            })
            .collect();
        Ok(Self {
            convs,
            window: cfg.window,
        })
    }

    pub fn config(&self) -> LambdaNetConfig {
        LambdaNetConfig {
            window: self.window,
            channels: self.convs.iter().map(|c| c.out_channels()).collect(),
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.weight"), &c.weight));
            out.push((format!("{prefix}.conv{i}.bias"), &c.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Weights for every band of `a` (and `b`), each in (0, 1).
    pub fn infer(&self, a: &HsiCube, b: &HsiCube) -> Result<Vec<f64>> {
        Ok(self.infer_cached(a, b)?.0)
    }

    pub fn infer_cached(&self, a: &HsiCube, b: &HsiCube) -> Result<(Vec<f64>, LambdaCache)> {
        ensure_shape(a.shape(), b.shape())?;
        let (bands, h, w) = a.dims3()?;
        let window = SpatialMap::centered(h, w, self.window);
        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let mut cur = window.apply(&Tensor::new(&[2, bands, h, w], stacked)?)?;
        let n = self.convs.len();
        let mut inputs = Vec::with_capacity(n);
        let mut acts = Vec::with_capacity(n - 1);
        for (i, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(&cur)?;
            inputs.push(cur);
            cur = if i + 1 < n {
                let act = relu(&z);
                acts.push(act.clone());
                act
            } else {
                z
            };
        }
        let pooled = pool_per_band(&cur)?;
        let weights = sigmoid_map(&pooled);
        Ok((
            weights.data().to_vec(),
            LambdaCache {
                window,
                inputs,
                acts,
                last_shape: cur.shape().to_vec(),
                weights,
                shape: [bands, h, w],
            },
        ))
    }

    /// Returns the gradients with respect to both inputs and the parameters.
    pub fn backward(&self, cache: &LambdaCache, grad_weights: &[f64]) -> Result<(HsiCube, HsiCube, LambdaNet)> {
        let [bands, h, w] = cache.shape;
        if grad_weights.len() != bands {
            return Err(Error::ShapeMismatch {
                expected: vec![bands],
                found: vec![grad_weights.len()],
            });
        }
        let g = Tensor::new(&[bands], grad_weights.to_vec())?;
        let gp = sigmoid_backward(&cache.weights, &g)?;
        let mut g = unpool_per_band(&gp, &cache.last_shape)?;
        let mut grads = self.zeros_like();
        for i in (0..self.convs.len()).rev() {
            if i + 1 < self.convs.len() {
                g = relu_backward(&cache.acts[i], &g)?;
            }
            let cg = self.convs[i].backward(&cache.inputs[i], &g)?;
            grads.convs[i].weight = cg.weight;
            grads.convs[i].bias = cg.bias;
            g = cg.input;
        }
        let full = cache.window.adjoint(&g)?.into_data();
        let half = bands * h * w;
        let ga = Tensor::new(&[bands, h, w], full[..half].to_vec())?;
        let gb = Tensor::new(&[bands, h, w], full[half..].to_vec())?;
        Ok((ga, gb, grads))
    }
}

/// Mean over channels and space for every band of a `C x B x H x W` map.
fn pool_per_band(x: &Tensor) -> Result<Tensor> {
    let (c, b, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0; b];
    for ch in 0..c {
        for (band, o) in out.iter_mut().enumerate() {
            let start = (ch * b + band) * plane;
            *o += x.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    let n = (c * plane) as f64;
    Tensor::new(&[b], out.into_iter().map(|v| v / n).collect())
}

fn unpool_per_band(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (c, b, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let n = (c * h * w) as f64;
    let mut out = Tensor::zeros(shape);
    let plane = h * w;
    for ch in 0..c {
        for band in 0..b {
            let start = (ch * b + band) * plane;
            out.data_mut()[start..start + plane].fill(g[band] / n);
        }
    }
    Ok(out)
}
