use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::diffusion::schedule::DiffusionSchedule;
use crate::diffusion::unet::{ConditioningVector, ForwardOptions, UNetSpec, Unet};
use crate::diffusion::vae::Vae;
use crate::error::{Error, Result};
use crate::layers::{Optimizer, ParamStore};
use crate::util::{gather_batch, randn_tensor, seeded_rng, shuffled_indices, streams};

/// Settings for producing the frozen base stack.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub vae_epochs: usize,
    pub unet_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub spec: UNetSpec,
    pub schedule_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// The frozen pre-trained stack Phase B adapts. The beta endpoints are kept
/// so checkpoints can rebuild the schedule bit-exactly.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub vae: Vae,
    pub unet_store: ParamStore,
    pub unet: Unet,
    pub sched: DiffusionSchedule,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Per-epoch mean losses from both pretraining stages.
#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub vae_loss: Vec<f64>,
    pub unet_loss: Vec<f64>,
}

fn shuffle_rng(seed: u64, phase: u64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    seeded_rng(seed, streams::SHUFFLE + phase * 0x1_0000 + epoch as u64)
}

/// Encodes a full image set through the (frozen) VAE in chunks.
pub fn encode_dataset(vae: &Vae, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut latents = Vec::with_capacity(n * vae.latent_channels() * vae.latent_resolution().pow(2));
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let batch = gather_batch(images, &idx);
        let z = vae.encode_eval(&batch)?;
        latents.extend_from_slice(z.data());
    }
    Tensor::new(&vae.latent_shape(n), latents)
}

/// Trains the VAE (reconstruction), freezes it, trains the bare UNet on the
/// noise-prediction loss over the frozen VAE's latents, freezes that too.
pub fn pretrain_base(images: &Tensor, cfg: &PretrainConfig) -> Result<(BaseModel, PretrainReport)> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("empty pretraining dataset".into()));
    }
    cfg.spec.validate()?;
    let resolution = cfg.spec.image_resolution();
    if images.shape() != [n, 1, resolution, resolution] {
        return Err(Error::ShapeMismatch {
            left: images.shape().to_vec(),
            right: vec![n, 1, resolution, resolution],
        });
    }
    let mut report = PretrainReport::default();

    // Stage 1: VAE reconstruction.
    let mut vae_rng = seeded_rng(cfg.seed, streams::VAE_INIT);
    let mut vae = Vae::new(resolution, cfg.spec.latent_channels, &mut vae_rng)?;
    let mut opt = Optimizer::adam(cfg.learning_rate);
    for epoch in 0..cfg.vae_epochs {
        let mut rng = shuffle_rng(cfg.seed, streams::VAE_TRAIN, epoch);
        let order = shuffled_indices(&mut rng, n);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_batch(images, chunk);
            let mut tape = Tape::new();
            let bind = vae.store.bind(&mut tape);
            let x = tape.leaf(batch);
            let z = vae.encode(&mut tape, &bind, x)?;
            let xh = vae.decode(&mut tape, &bind, z)?;
            let loss = tape.mse(xh, x)?;
            epoch_loss += tape.value(loss).data()[0];
            batches += 1.0;
            tape.backward(loss)?;
            vae.store.export_grads(&tape, &bind);
            opt.step(&mut vae.store)?;
        }
        report.vae_loss.push(epoch_loss / batches);
    }
    vae.store.freeze_all();

    // Stage 2: bare UNet on frozen latents.
    let latents = encode_dataset(&vae, images)?;
    let sched = DiffusionSchedule::new(cfg.schedule_t, cfg.beta_start, cfg.beta_end)?;
    let mut unet_rng = seeded_rng(cfg.seed, streams::UNET_INIT);
    let mut store = ParamStore::new();
    let unet = Unet::new(&mut store, &cfg.spec, &mut unet_rng, true)?;
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut noise_rng = seeded_rng(cfg.seed, streams::UNET_TRAIN);
    let cond = ConditioningVector::null(cfg.spec.cond_dim);
    for epoch in 0..cfg.unet_epochs {
        let mut rng = shuffle_rng(cfg.seed, streams::UNET_TRAIN, epoch);
        let order = shuffled_indices(&mut rng, n);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let z0 = gather_batch(&latents, chunk);
            let b = chunk.len();
            let ts: Vec<usize> = (0..b)
                .map(|_| noise_rng.gen_range(1..=sched.t_max()))
                .collect();
            let eps = randn_tensor(&mut noise_rng, z0.shape());
            let alphas: Vec<f64> = ts.iter().map(|&t| sched.alpha(t)).collect();
            let sigmas: Vec<f64> = ts.iter().map(|&t| sched.sigma(t)).collect();

            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let vz0 = tape.constant(z0);
            let veps = tape.constant(eps);
            let zt = tape.per_sample_affine(vz0, veps, alphas, sigmas)?;
            let eps_hat = unet.forward(
                &mut tape,
                &bind,
                zt,
                &ts,
                &cond.batch(b),
                ForwardOptions::default(),
            )?;
            let loss = tape.mse(eps_hat, veps)?;
            epoch_loss += tape.value(loss).data()[0];
            batches += 1.0;
            tape.backward(loss)?;
            store.export_grads(&tape, &bind);
            opt.step(&mut store)?;
        }
        report.unet_loss.push(epoch_loss / batches);
    }
    store.freeze_all();

    Ok((
        BaseModel {
            vae,
            unet_store: store,
            unet,
            sched,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> PretrainConfig {
        PretrainConfig {
            vae_epochs: 2,
            unet_epochs: 1,
            batch_size: 4,
            learning_rate: 1e-4,
            seed,
            spec: UNetSpec {
                down_channels: vec![4, 8],
                mid_channels: 8,
                latent_channels: 2,
                base_resolution: 4,
                t_embed_dim: 8,
                cond_dim: 4,
            },
            schedule_t: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    fn tiny_images(seed: u64, n: usize) -> Tensor {
        let mut rng = seeded_rng(seed, 999);
        let raw = randn_tensor(&mut rng, &[n, 1, 16, 16]);
        let data = raw.data().iter().map(|v| v.tanh()).collect();
        Tensor::new(&[n, 1, 16, 16], data).unwrap()
    }

    #[test]
    fn rejects_empty_and_misshaped_datasets() {
        let cfg = tiny_cfg(1);
        let bad = tiny_images(1, 4).reshaped(&[4, 1, 8, 32]).unwrap();
        assert!(pretrain_base(&bad, &cfg).is_err());
    }

    #[test]
    fn all_parameters_frozen_after_pretraining() {
        let cfg = tiny_cfg(2);
        let images = tiny_images(2, 8);
        let (base, report) = pretrain_base(&images, &cfg).unwrap();
        assert!(base.vae.store.iter().all(|e| !e.trainable()));
        assert!(base.unet_store.iter().all(|e| !e.trainable()));
        assert_eq!(report.vae_loss.len(), 2);
        assert_eq!(report.unet_loss.len(), 1);
    }

    #[test]
    fn pretraining_is_bit_reproducible() {
        let cfg = tiny_cfg(3);
        let images = tiny_images(3, 8);
        let (a, _) = pretrain_base(&images, &cfg).unwrap();
        let (b, _) = pretrain_base(&images, &cfg).unwrap();
        for (ea, eb) in a.unet_store.iter().zip(b.unet_store.iter()) {
            assert_eq!(ea.name(), eb.name());
            assert!(ea
                .tensor()
                .data()
                .iter()
                .zip(eb.tensor().data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (ea, eb) in a.vae.store.iter().zip(b.vae.store.iter()) {
            assert!(ea
                .tensor()
                .data()
                .iter()
                .zip(eb.tensor().data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
