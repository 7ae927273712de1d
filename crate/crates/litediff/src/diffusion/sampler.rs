use rayon::prelude::*;

use crate::adaptation::HookedUnet;
use crate::autodiff::Tensor;
use crate::diffusion::schedule::DiffusionSchedule;
use crate::diffusion::unet::ConditioningVector;
use crate::diffusion::vae::Vae;
use crate::error::{Error, Result};
use crate::util::{randn_tensor, seeded_rng, streams};

/// One ancestral reverse-diffusion update:
/// `z_{t-1} = (z_t - (beta_t / sigma_t) eps_hat) / sqrt(1 - beta_t)
///            + sqrt(posterior_var_t) * noise`.
/// The posterior variance vanishes at t = 1, so the final step is
/// deterministic regardless of `noise`.
pub fn ddpm_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t, false)?;
    if z_t.shape() != eps_hat.shape() || z_t.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            left: z_t.shape().to_vec(),
            right: eps_hat.shape().to_vec(),
        });
    }
    let beta = sched.beta(t);
    let sigma = sched.sigma(t);
    let mean_scale = 1.0 / (1.0 - beta).sqrt();
    let eps_scale = beta / sigma;
    // posterior variance: (sigma_{t-1}^2 / sigma_t^2) * beta_t
    let s_prev = sched.sigma(t - 1);
    let post_var = (s_prev * s_prev) / (sigma * sigma) * beta;
    let post_std = post_var.sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((z, e), n)| mean_scale * (z - eps_scale * e) + post_std * n)
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Draws `z_T` from a standard normal, runs the full reverse trajectory
/// through the (possibly adapted) denoiser, and decodes the final latent.
/// Fully determined by the seed.
pub fn sample(
    model: &HookedUnet,
    vae: &Vae,
    sched: &DiffusionSchedule,
    cond: &ConditioningVector,
    seed: u64,
) -> Result<Tensor> {
    let spec = &model.base.spec;
    let mut rng = seeded_rng(seed, streams::SAMPLE);
    let shape = [
        1,
        spec.latent_channels,
        spec.base_resolution,
        spec.base_resolution,
    ];
    let mut z = randn_tensor(&mut rng, &shape);
    let cond_batch = cond.batch(1);
    for t in (1..=sched.t_max()).rev() {
        let eps_hat = model.forward_eval(&z, t, &cond_batch)?;
        let noise = if t > 1 {
            randn_tensor(&mut rng, &shape)
        } else {
            Tensor::zeros(&shape)
        };
        z = ddpm_step(&z, &eps_hat, t, sched, &noise)?;
    }
    vae.decode_eval(&z)
}

/// Samples `count` images; image i uses seed `base_seed + i`, so the batch is
/// order-independent and safe to parallelize. Returns a (count,1,R,R) stack.
pub fn sample_batch(
    model: &HookedUnet,
    vae: &Vae,
    sched: &DiffusionSchedule,
    cond: &ConditioningVector,
    base_seed: u64,
    count: usize,
) -> Result<Tensor> {
    let images: Vec<Tensor> = (0..count)
        .into_par_iter()
        .map(|i| sample(model, vae, sched, cond, base_seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let r = vae.image_resolution();
    let mut data = Vec::with_capacity(count * r * r);
    for img in &images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[count, 1, r, r], data)
}
