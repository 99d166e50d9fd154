//! Hybrid deep supervision: one U-shaped residual network trained jointly
//! for whole-image classification and pixel-wise segmentation, with a
//! multi-task supervision path at every scale.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff over NCHW tensors plus a
//!   finite-difference oracle.
//! - [`model`]: the U-ResNet and its per-scale supervision paths.
//! - [`loss`]: the weighted multi-level objective with a sparse MIL
//!   classification cost.
//! - [`data`]: synthetic mammogram-like data, preprocessing, augmentation
//!   and patch sampling.
//! - [`trainer`]: SGD with momentum, learning-rate and level-weight
//!   schedules, checkpoints.
//! - [`metrics`]: DSC / SE / FPI and ACC / AUC / F1 / precision / recall.
//! - [`verify`]: on-demand self-checks used by `hds verify`.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use rng::RngState;
pub use tensor::Tensor;
