//! Wavelet-domain diffusion GAN for single-image super-resolution.
//!
//! The model runs diffusion in Haar sub-band space: images are packed into
//! four half-resolution sub-bands per color channel, a conditional generator
//! denoises in a handful of steps, and an adversarial loss sharpens the
//! result. Everything — the tensor engine, the networks, the training loop —
//! is CPU-only f32 with bitwise-reproducible results for a fixed seed.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datapipe;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
