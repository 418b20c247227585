//! Spatial index maps: reflect padding, cropping, and the fixed-size window
//! the fusion-weight predictor looks at. Each map gathers along the last two
//! axes; its adjoint scatter-adds.

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`). Reflection repeats as often as needed.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialMap {
    in_h: usize,
    in_w: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl SpatialMap {
    /// Reflect-pads at the bottom and right so both extents become
    /// multiples of `multiple`.
    pub fn pad_to_multiple(h: usize, w: usize, multiple: usize) -> Self {
        let up = |n: usize| n.div_ceil(multiple) * multiple;
        Self {
            in_h: h,
            in_w: w,
            rows: (0..up(h)).map(|i| reflect_index(i as isize, h)).collect(),
            cols: (0..up(w)).map(|i| reflect_index(i as isize, w)).collect(),
        }
    }

    /// Keeps the top-left `out_h x out_w` window.
    pub fn crop(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h > h || out_w > w {
            return Err(Error::invalid(format!(
                "cannot crop {h}x{w} to {out_h}x{out_w}"
            )));
        }
        Ok(Self {
            in_h: h,
            in_w: w,
            rows: (0..out_h).collect(),
            cols: (0..out_w).collect(),
        })
    }

    /// A centred `size x size` window; extents smaller than `size` are
    /// reflect-padded symmetrically.
    pub fn centered(h: usize, w: usize, size: usize) -> Self {
        let axis = |n: usize| {
            let off = (n as isize - size as isize).div_euclid(2);
            (0..size).map(|i| reflect_index(i as isize + off, n)).collect::<Vec<_>>()
        };
        Self {
            in_h: h,
            in_w: w,
            rows: axis(h),
            cols: axis(w),
        }
    }

    pub fn output_extents(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    fn leading(&self, shape: &[usize]) -> Result<usize> {
        let n = shape.len();
        if n < 2 || shape[n - 2] != self.in_h || shape[n - 1] != self.in_w {
            return Err(Error::invalid(format!(
                "spatial map expects trailing extents {}x{}, got shape {shape:?}",
                self.in_h, self.in_w
            )));
        }
        Ok(shape[..n - 2].iter().product())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let lead = self.leading(x.shape())?;
        let (oh, ow) = self.output_extents();
        let mut shape = x.shape().to_vec();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        let mut out = Tensor::zeros(&shape);
        let plane = self.in_h * self.in_w;
        let dst = out.data_mut();
        for s in 0..lead {
            let src = &x.data()[s * plane..(s + 1) * plane];
            for (i, &r) in self.rows.iter().enumerate() {
                let row = &src[r * self.in_w..(r + 1) * self.in_w];
                let o = &mut dst[(s * oh + i) * ow..(s * oh + i + 1) * ow];
                for (v, &c) in o.iter_mut().zip(&self.cols) {
                    *v = row[c];
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`SpatialMap::apply`].
    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let (oh, ow) = self.output_extents();
        let mut shape = g.shape().to_vec();
        let n = shape.len();
        if n < 2 {
            return Err(Error::invalid("spatial map gradient must have rank >= 2"));
        }
        ensure_shape(&[oh, ow], &shape[n - 2..])?;
        shape[n - 2] = self.in_h;
        shape[n - 1] = self.in_w;
        let lead: usize = shape[..n - 2].iter().product();
        let mut out = Tensor::zeros(&shape);
        let plane = self.in_h * self.in_w;
        let dst = out.data_mut();
        for s in 0..lead {
            let d = &mut dst[s * plane..(s + 1) * plane];
            for (i, &r) in self.rows.iter().enumerate() {
                let src = &g.data()[(s * oh + i) * ow..(s * oh + i + 1) * ow];
                for (&v, &c) in src.iter().zip(&self.cols) {
                    d[r * self.in_w + c] += v;
                }
            }
        }
        Ok(out)
    }
}
