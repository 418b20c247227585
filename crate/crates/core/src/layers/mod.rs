//! Differentiable building blocks: convolutions, activations, spatial
//! resampling, and a finite-difference gradient checker.

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod resample;

pub use activation::{relu, relu_backward, sigmoid_backward, sigmoid_map};
pub use conv::{Conv2d, Conv3d, ConvGrads, Deconv3d};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use resample::{reflect_index, SpatialMap};
