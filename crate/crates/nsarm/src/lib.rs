//! Next-scale autoregressive modeling for real-world image super-resolution.
//!
//! The pipeline decomposes an image latent into bitwise-quantized multi-scale
//! residuals, maps a degraded low-resolution input onto the preliminary
//! scales with a transformation network, and refines the remaining scales
//! with a block-causal transformer. Training runs in two stages (pathway
//! alignment, then full fine-tuning); evaluation includes reference metrics
//! and a robustness protocol over per-image quality scores.

pub mod bsq;
pub mod cli;
pub mod error;
pub mod numerics;
pub mod residual;
pub mod schedule;

pub use error::{Error, Result};
