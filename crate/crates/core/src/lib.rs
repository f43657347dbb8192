//! Unsupervised domain adaptation for multivariate time-series classification
//! with a local-global encoder.
//!
//! A series is encoded twice: a patching transformer produces a global
//! representation (one token per patch) and a bank of convolution stacks with
//! different kernel sizes produces local representations. Cross-attention
//! from the global tokens into each local stream, followed by position-free
//! self-attention and sum pooling, yields the fused feature fed to the
//! classifier and the domain discriminator. Training combines classification,
//! adversarial domain, DTW-triplet, margin-triplet and prototype center losses.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the model and
//! trainer run in `f64` through the aliases below.

pub mod data;
pub mod dtw;
pub mod error;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// The precision every model and training run uses.
pub type Float = f64;
pub type Tensor = tensor::Tensor<Float>;
pub type Graph = tensor::Graph<Float>;
pub type ParamStore = tensor::ParamStore<Float>;
pub type DtwResult = dtw::DtwResult<Float>;
