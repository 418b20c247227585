//! Dense row-major tensors and the small amount of matrix arithmetic the
//! rest of the crate needs.
//!
//! Precision is chosen at construction through the element type:
//! `Tensor<f32>` or `Tensor<f64>` (the default). Hyperspectral cubes are
//! stored band-major as `bands x height x width`; feature maps add a leading
//! channel axis, `channels x bands x height x width`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{ensure_shape, Error, Result};

pub const MAX_RANK: usize = 5;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// Bytes per element on disk.
    const BYTES: usize;
    /// Off-diagonal convergence threshold of the Jacobi SVD, relative to
    /// the Frobenius norm of the input.
    const SVD_TOL: f64;
    /// Dtype code used in cube files.
    const DTYPE_CODE: u32;

    fn as_f64(self) -> f64;
    fn cast_from(v: f64) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const SVD_TOL: f64 = 1e-7;
    const DTYPE_CODE: u32 = 1;

    fn as_f64(self) -> f64 {
        self as f64
    }
    fn cast_from(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const SVD_TOL: f64 = 1e-12;
    const DTYPE_CODE: u32 = 2;

    fn as_f64(self) -> f64 {
        self
    }
    fn cast_from(v: f64) -> Self {
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// A `bands x height x width` cube.
pub type HsiCube = Tensor<f64>;
/// A `channels x bands x height x width` feature map.
pub type FeatureMap = Tensor<f64>;

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::invalid(format!(
            "tensor rank must be between 1 and {MAX_RANK}, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ExtentMismatch {
                from: vec![data.len()],
                from_len: data.len(),
                to: shape.to_vec(),
                to_len: len,
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.len() <= MAX_RANK, "bad rank {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the data under a new shape; row-major order is preserved.
    pub fn reshape(self, new_shape: &[usize]) -> Result<Self> {
        check_rank(new_shape)?;
        let to_len: usize = new_shape.iter().product();
        if to_len != self.data.len() {
            return Err(Error::ExtentMismatch {
                from: self.shape,
                from_len: self.data.len(),
                to: new_shape.to_vec(),
                to_len,
            });
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_shape(&self.shape, &other.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure_shape(&self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        ensure_shape(&self.shape, &other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        ensure_shape(&self.shape, &other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
        }
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// Extents of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::invalid(format!(
                "expected a 3-D cube, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::invalid(format!(
                "expected a 4-D feature map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                expected: vec![k, n],
                found: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Scalar> std::ops::IndexMut<usize> for Tensor<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}
