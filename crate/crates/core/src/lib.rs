//! Entropy rectifying guidance for flow-matching generative models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autograd`]: dense tensors and a reverse-mode tape.
//! - [`hopfield`]: attention as Hopfield-energy descent, with the
//!   temperature / step-size / identity / smoothing rectifications.
//! - [`model`]: a small joint-attention diffusion transformer and a toy
//!   prompt encoder, both with rectifiable attention.
//! - [`train`], [`checkpoint`]: conditional flow-matching training.
//! - [`guidance`], [`sampler`]: the guidance family and Euler sampling.
//! - [`metrics`], [`analysis`], [`data`]: evaluation, diagnostics and the
//!   synthetic multi-mode dataset.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations used by the models.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod guidance;
pub mod hopfield;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use hopfield::{RectMode, RectificationConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor, the storage type of models and checkpoints.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by oracles and gradient checks.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tape.
pub type Tape32 = autograd::Tape<f32>;
/// Single-precision model parameters.
pub type Params32 = model::ModelParams<f32>;
