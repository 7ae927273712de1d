//! Everything added on top of the frozen base stack: residual adapters and
//! their hook patterns, the morphology autoencoder, the pixel discriminator,
//! and the loss assembly.

mod adapter;
mod discriminator;
mod hooked;
mod lma;
mod losses;
mod pattern;

pub use adapter::{AdapterActivation, AdapterLayer};
pub use discriminator::PixelDiscriminator;
pub use hooked::HookedUnet;
pub use lma::LmaModel;
pub use losses::{
    adversarial_loss, discriminator_loss, morph_loss, total_gen_loss, AdvTarget, LossWeights,
};
pub use pattern::{HookPattern, ABLATION_PATTERNS};
