//! Semantic-guided latent diffusion for 4× image super-resolution.
//!
//! The crate covers the whole pipeline at desk scale: degradation and
//! dataset assembly, a small VAE, a frozen multi-scale semantic extractor,
//! a control-branch U-Net denoiser with prompt and semantic cross-attention,
//! guided sampling, training loops and image-quality scoring.

pub mod autoencoder;
pub mod config;
pub mod degradation;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod semantic;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
