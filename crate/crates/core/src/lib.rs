//! Hyperspectral image denoising: a U-Net with learned singular-value
//! thresholding in the Haar domain, followed by weighted refinement steps.

pub mod diagnostics;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod layers;
pub mod lowrank;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod svd;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, HsiCube, Scalar, Tensor};
