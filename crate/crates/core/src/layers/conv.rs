//! Direct 3-D cross-correlation kernels and the conv/deconv layers built on
//! them. Feature maps are `channels x depth x height x width`; the depth
//! axis is the spectral (band) axis.
//!
//! Three raw kernels cover everything, each an unrolled-patch matrix
//! product:
//! * `correlate`: `y[o] = Σ w[o,i,k] x[i, s·p + k - pad]`
//! * `correlate_adjoint`: its adjoint with respect to `x`
//! * `correlate_weight_grad`: its adjoint with respect to `w`
//!
//! A transposed convolution is `correlate_adjoint` run forward, so the
//! conv/deconv adjoint identity holds by construction.

use rand::Rng;

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    in_ch: usize,
    out_ch: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Output positions `o` along one axis for which `o·s + k - pad` lands
    /// inside the input, as a half-open range.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n_in, n_out) = (self.input[axis] as isize, self.output[axis] as isize);
        let (s, off) = (self.stride[axis] as isize, k as isize - self.pad[axis] as isize);
        // o·s + off >= 0  and  o·s + off <= n_in - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_incl = (n_in - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, n_out);
        (lo.min(n_out) as usize, hi.max(lo.min(n_out)) as usize)
    }
}

/// Output extent of a strided, padded correlation along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of the matching transposed correlation.
pub fn deconv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize, output_pad: usize) -> Option<usize> {
    ((input.checked_sub(1)? * stride) + kernel + output_pad).checked_sub(2 * pad)
}

/// Visits every (input channel, tap, output row) triple whose taps land
/// inside the input. `f(col_start, x_start, len, stride)` pairs column-matrix
/// entries `col_start..col_start + len` with input entries `x_start`,
/// `x_start + stride`, ...
fn for_each_row(g: &Geometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [kd, kh, kw] = g.kernel;
    let [_, ih_n, iw_n] = g.input;
    let [_, oh_n, ow_n] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ksize = kd * kh * kw;
    let (in_len, out_len) = (g.in_len(), g.out_len());
    for i in 0..g.in_ch {
        for a in 0..kd {
            let (d0, d1) = g.valid(0, a);
            for b in 0..kh {
                let (h0, h1) = g.valid(1, b);
                for c in 0..kw {
                    let (w0, w1) = g.valid(2, c);
                    if w0 == w1 {
                        continue;
                    }
                    let row = (i * ksize + (a * kh + b) * kw + c) * out_len;
                    for od in d0..d1 {
                        let id = od * sd + a - pd;
                        for oh in h0..h1 {
                            let ih = oh * sh + b - ph;
                            let col = row + (od * oh_n + oh) * ow_n + w0;
                            let x = i * in_len + (id * ih_n + ih) * iw_n + w0 * sw + c - pw;
                            f(col, x, w1 - w0, sw);
                        }
                    }
                }
            }
        }
    }
}

/// Unrolls the input into an `(in_ch·taps) x out_positions` matrix with
/// zeros where a tap falls into the padding.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let ksize: usize = g.kernel.iter().product();
    let mut col = vec![0.0; g.in_ch * ksize * g.out_len()];
    for_each_row(g, |c, xs, len, s| {
        if s == 1 {
            col[c..c + len].copy_from_slice(&x[xs..xs + len]);
        } else {
            for (t, v) in col[c..c + len].iter_mut().enumerate() {
                *v = x[xs + t * s];
            }
        }
    });
    col
}

/// Adjoint of `im2col`: scatter-adds the matrix back onto the input grid.
fn col2im(col: &[f64], g: &Geometry, x: &mut [f64]) {
    for_each_row(g, |c, xs, len, s| {
        if s == 1 {
            for (v, d) in x[xs..xs + len].iter_mut().zip(&col[c..c + len]) {
                *v += d;
            }
        } else {
            for (t, d) in col[c..c + len].iter().enumerate() {
                x[xs + t * s] += d;
            }
        }
    });
}

/// `c = a·b + beta·c` for an `m x k` times `k x n` product with `c` dense
/// row-major; `a` and `b` are addressed through (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
        assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn taps(g: &Geometry) -> usize {
    g.in_ch * g.kernel.iter().product::<usize>()
}

fn correlate(x: &[f64], w: &[f64], g: &Geometry, y: &mut [f64]) {
    let col = im2col(x, g);
    let (k, n) = (taps(g), g.out_len());
    gemm(g.out_ch, k, n, w, (k, 1), &col, (n, 1), 1.0, y);
}

fn correlate_adjoint(gy: &[f64], w: &[f64], g: &Geometry, gx: &mut [f64]) {
    let (k, n) = (taps(g), g.out_len());
    let mut col = vec![0.0; k * n];
    gemm(k, g.out_ch, n, w, (1, k), gy, (n, 1), 0.0, &mut col);
    col2im(&col, g, gx);
}

fn correlate_weight_grad(x: &[f64], gy: &[f64], g: &Geometry, gw: &mut [f64]) {
    let col = im2col(x, g);
    let (k, n) = (taps(g), g.out_len());
    gemm(g.out_ch, n, k, gy, (n, 1), &col, (1, n), 1.0, gw);
}

fn add_bias(y: &mut [f64], bias: &[f64]) {
    let per = y.len() / bias.len();
    for (chunk, &b) in y.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(gy: &[f64], channels: usize) -> Vec<f64> {
    let per = gy.len() / channels;
    gy.chunks(per).map(|c| c.iter().sum()).collect()
}

fn kernel_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Gradients of a conv-type layer.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// 3-D convolution (cross-correlation) plus per-channel bias.
/// `weight` is `out x in x kD x kH x kW`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3d {
    pub fn new(weight: Tensor, bias: Tensor, stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        if weight.rank() != 5 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::invalid(format!(
                "conv3d weight must be out x in x kD x kH x kW with matching bias, got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d stride must be positive"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Kernel drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.iter().product::<usize>();
        let shape = [out_ch, in_ch, kernel[0], kernel[1], kernel[2]];
        Self {
            weight: kernel_init(&shape, fan_in, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = self.kernel();
        let mut out = [0; 3];
        for ax in 0..3 {
            out[ax] = conv_out_extent(input[ax], k[ax], self.stride[ax], self.padding[ax])
                .filter(|&e| e >= 1)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "conv3d: input extents {input:?} with kernel {k:?}, stride {:?}, padding {:?} give no output",
                        self.stride, self.padding
                    ))
                })?;
        }
        Ok(out)
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let (c, d, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::invalid(format!(
                "conv3d expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let input = [d, h, w];
        Ok(Geometry {
            in_ch: c,
            out_ch: self.out_channels(),
            input,
            output: self.output_extents(input)?,
            kernel: self.kernel(),
            stride: self.stride,
            pad: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let [d, h, w] = g.output;
        let mut y = Tensor::zeros(&[g.out_ch, d, h, w]);
        correlate(x.data(), self.weight.data(), &g, y.data_mut());
        add_bias(y.data_mut(), self.bias.data());
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let g = self.geometry(x)?;
        let [d, h, w] = g.output;
        ensure_shape(&[g.out_ch, d, h, w], grad_out.shape())?;
        let mut gx = x.zeros_like();
        correlate_adjoint(grad_out.data(), self.weight.data(), &g, gx.data_mut());
        let mut gw = self.weight.zeros_like();
        correlate_weight_grad(x.data(), grad_out.data(), &g, gw.data_mut());
        let gb = Tensor::new(&[g.out_ch], bias_grad(grad_out.data(), g.out_ch))?;
        Ok(ConvGrads {
            input: gx,
            weight: gw,
            bias: gb,
        })
    }
}

/// Transposed 3-D convolution. `weight` is `in x out x kD x kH x kW`, i.e.
/// the weight of the conv3d this layer is the adjoint of.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
}

impl Deconv3d {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
    ) -> Result<Self> {
        if weight.rank() != 5 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::invalid(format!(
                "deconv3d weight must be in x out x kD x kH x kW with matching bias, got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if stride.contains(&0) {
            return Err(Error::invalid("deconv3d stride must be positive"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.iter().product::<usize>();
        let shape = [in_ch, out_ch, kernel[0], kernel[1], kernel[2]];
        Self {
            weight: kernel_init(&shape, fan_in, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = self.kernel();
        let mut out = [0; 3];
        for ax in 0..3 {
            out[ax] = deconv_out_extent(input[ax], k[ax], self.stride[ax], self.padding[ax], self.output_padding[ax])
                .filter(|&e| e >= 1)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "deconv3d: input extents {input:?} with kernel {k:?}, stride {:?}, padding {:?} give no output",
                        self.stride, self.padding
                    ))
                })?;
        }
        Ok(out)
    }

    /// Geometry of the underlying correlation, which maps this layer's
    /// output back onto its input.
    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let (c, d, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::invalid(format!(
                "deconv3d expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let output = self.output_extents([d, h, w])?;
        let g = Geometry {
            in_ch: self.out_channels(),
            out_ch: c,
            input: output,
            output: [d, h, w],
            kernel: self.kernel(),
            stride: self.stride,
            pad: self.padding,
        };
        // The correlation over the produced extents must come back to the input.
        for ax in 0..3 {
            let back = conv_out_extent(g.input[ax], g.kernel[ax], g.stride[ax], g.pad[ax]);
            if back != Some(g.output[ax]) {
                return Err(Error::invalid(format!(
                    "deconv3d output padding {:?} is inconsistent with stride {:?}",
                    self.output_padding, self.stride
                )));
            }
        }
        Ok(g)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let [d, h, w] = g.input;
        let mut y = Tensor::zeros(&[g.in_ch, d, h, w]);
        correlate_adjoint(x.data(), self.weight.data(), &g, y.data_mut());
        add_bias(y.data_mut(), self.bias.data());
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let g = self.geometry(x)?;
        let [d, h, w] = g.input;
        ensure_shape(&[g.in_ch, d, h, w], grad_out.shape())?;
        let mut gx = x.zeros_like();
        correlate(grad_out.data(), self.weight.data(), &g, gx.data_mut());
        let mut gw = self.weight.zeros_like();
        correlate_weight_grad(grad_out.data(), x.data(), &g, gw.data_mut());
        let gb = Tensor::new(&[g.in_ch], bias_grad(grad_out.data(), g.in_ch))?;
        Ok(ConvGrads {
            input: gx,
            weight: gw,
            bias: gb,
        })
    }
}

/// 2-D convolution over `N x C x H x W` tensors, run as a 3-D convolution
/// with a unit-depth kernel over the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `out x in x kH x kW`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Conv2d {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel[0] * kernel[1];
        Self {
            weight: kernel_init(&[out_ch, in_ch, kernel[0], kernel[1]], fan_in, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    fn as_3d(&self) -> Result<Conv3d> {
        let s = self.weight.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!("conv2d weight must be 4-D, got {s:?}")));
        }
        Conv3d::new(
            self.weight.clone().reshape(&[s[0], s[1], 1, s[2], s[3]])?,
            self.bias.clone(),
            [1, self.stride[0], self.stride[1]],
            [0, self.padding[0], self.padding[1]],
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.as_3d()?.forward(&swap01(x)?)?;
        swap01(&y)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let g = self.as_3d()?.backward(&swap01(x)?, &swap01(grad_out)?)?;
        Ok(ConvGrads {
            input: swap01(&g.input)?,
            weight: g.weight.reshape(self.weight.shape())?,
            bias: g.bias,
        })
    }
}

/// Swaps the two leading axes of a rank-4 tensor.
fn swap01(x: &Tensor) -> Result<Tensor> {
    let (a, b, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, a, h, w]);
    for i in 0..a {
        for j in 0..b {
            let src = &x.data()[(i * b + j) * plane..(i * b + j + 1) * plane];
            out.data_mut()[(j * a + i) * plane..(j * a + i + 1) * plane].copy_from_slice(src);
        }
    }
    Ok(out)
}
