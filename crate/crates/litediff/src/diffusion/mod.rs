//! The frozen base generative stack: noise schedule, forward diffusion, the
//! deterministic image autoencoder, the UNet denoiser, base-domain
//! pretraining and the ancestral sampler.

mod pretrain;
mod sampler;
mod schedule;
mod unet;
mod vae;

pub use pretrain::{encode_dataset, pretrain_base, BaseModel, PretrainConfig, PretrainReport};
pub use sampler::{ddpm_step, sample, sample_batch};
pub use schedule::{forward_diffuse, DiffusionSchedule};
pub use unet::{
    timestep_embedding, ConditioningVector, ForwardOptions, ForwardTrace, ResBlock, UNetSpec, Unet,
};
pub use vae::Vae;
