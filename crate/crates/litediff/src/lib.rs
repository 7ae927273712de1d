//! Lightweight adaptation of a frozen toy latent-diffusion model.
//!
//! The crate trains only small residual adapter modules hooked into a frozen
//! UNet denoiser, guided by a morphology-autoencoder penalty and a pixel
//! discriminator, and ships the full experiment harness (synthetic datasets,
//! two-phase training, sampling, desk-scale metrics, ablation drivers).
//! Everything runs on CPU in f64 and is bit-reproducible under a fixed seed.

pub mod adaptation;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod training;
pub mod util;

pub use cli::run_cli;
pub use error::{Error, Result};
