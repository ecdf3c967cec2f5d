//! Self-learning subspace diffusion fusion of a low-resolution hyperspectral
//! image with a high-resolution multispectral image.
//!
//! The pipeline trains two small noise-prediction networks on the observed
//! pair alone (a fully connected spectral net and a UNet-style spatial net),
//! then runs a guided deterministic reverse diffusion over a spectral basis
//! and a reduced coefficient whose product is the fused image. A residual
//! refinement step keeps the two components aligned during sampling.

pub mod datapipe;
pub mod degradation;
pub mod diffusion;
pub mod metrics;
pub mod networks;
pub mod sampler;
pub mod error;
pub mod resample;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
