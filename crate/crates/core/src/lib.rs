//! Few-shot image generation with feature equalization fusion.
//!
//! A mutual encoder-decoder generator fuses K images of one category into a new image. Encoder
//! features are split into texture (shallow) and structure (deep) branches, fused locally
//! against a random base image, equalized and fed back to the decoder through skip connections.

pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod generator;
pub mod layers;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};

/// Recorded in run and checkpoint manifests.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
