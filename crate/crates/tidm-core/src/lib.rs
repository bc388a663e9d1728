//! Desk-scale text-and-anchor-image guided latent diffusion.
//!
//! The pipeline: a convolutional autoencoder maps sprite images to a
//! compact latent space; a two-stream conditional U-Net denoises latents
//! under text and anchor-image conditioning; deterministic DDIM sampling
//! generates images, optionally initialized from an anchor latent at a
//! chosen denoising strength; Dreambooth-style fine-tuning binds new
//! subjects to placeholder tokens with a prior-preservation loss.

pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod numerics;
pub mod probe;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Result, TidmError};
