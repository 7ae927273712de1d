use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{
    adversarial_loss, discriminator_loss, morph_loss, total_gen_loss, HookPattern, HookedUnet,
    LmaModel, PixelDiscriminator,
};
use crate::autodiff::{Tape, Tensor};
use crate::diffusion::{BaseModel, DiffusionSchedule, Vae};
use crate::error::{Error, Result};
use crate::layers::{clip_global_norm, Optimizer};
use crate::training::config::{LossBreakdown, TrainConfig, X0Estimate};
use crate::util::{gather_batch, randn_tensor, seeded_rng, shuffled_indices, streams};

/// Everything one adapter-training run owns: the hooked model, the frozen
/// codecs, the discriminator, both optimizers and the noise stream.
pub struct PhaseBState {
    pub model: HookedUnet,
    pub vae: Vae,
    pub lma: LmaModel,
    pub disc: PixelDiscriminator,
    pub sched: DiffusionSchedule,
    pub opt_adapter: Optimizer,
    pub opt_disc: Optimizer,
    pub rng: ChaCha8Rng,
    pub cfg: TrainConfig,
    pub step: u64,
    pub epoch: usize,
}

impl PhaseBState {
    /// Attaches fresh zero-initialized adapters to the frozen base and wires
    /// up a new discriminator plus optimizers.
    pub fn new(
        base: BaseModel,
        lma: LmaModel,
        pattern: &HookPattern,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.schedule_t != base.sched.t_max() {
            return Err(Error::Config(format!(
                "config schedule_t {} disagrees with base schedule T {}",
                cfg.schedule_t,
                base.sched.t_max()
            )));
        }
        if lma.image_resolution() != base.vae.image_resolution() {
            return Err(Error::Config(
                "morphology model and base stack disagree on resolution".into(),
            ));
        }
        let mut model = HookedUnet::bare(base.unet_store, base.unet);
        model.attach_adapters(pattern, cfg.adapter_activation)?;
        let mut disc_rng = seeded_rng(cfg.seed, streams::DISC_INIT);
        let disc = PixelDiscriminator::new(base.vae.image_resolution(), &mut disc_rng)?;
        let rng = seeded_rng(cfg.seed, streams::ADAPT_TRAIN);
        Ok(Self {
            model,
            vae: base.vae,
            lma,
            disc,
            sched: base.sched,
            opt_adapter: Optimizer::adam(cfg.learning_rate),
            opt_disc: Optimizer::adam(cfg.learning_rate),
            rng,
            cfg,
            step: 0,
            epoch: 0,
        })
    }
}

/// One minibatch update, lines 2-11 of the Phase B loop, executed in order:
/// encode, draw (t, eps), noise the latent, predict, reconstruction loss,
/// decode the estimate, update the discriminator, re-score the decoded batch
/// on the *updated* discriminator for the adversarial term, morphology
/// penalty, composite loss, adapter update.
pub fn phase_b_step(
    state: &mut PhaseBState,
    x_real: &Tensor,
    cond: &Tensor,
) -> Result<LossBreakdown> {
    phase_b_step_probed(state, x_real, cond, None)
}

pub(crate) fn phase_b_step_probed(
    state: &mut PhaseBState,
    x_real: &Tensor,
    cond: &Tensor,
    grad_probe: Option<&mut Vec<(String, Vec<f64>)>>,
) -> Result<LossBreakdown> {
    let batch = x_real.shape()[0];
    let mut tape = Tape::new();
    let vae_bind = state.vae.store.bind(&mut tape);
    let unet_bind = state.model.store.bind(&mut tape);
    let lma_bind = state.lma.store.bind(&mut tape);
    let disc_bind = state.disc.store.bind(&mut tape);

    // line 2: encode the clean batch
    let x = tape.constant(x_real.clone());
    let z0 = state.vae.encode(&mut tape, &vae_bind, x)?;

    // line 3: per-sample timestep and noise draws (timesteps first)
    let t_max = state.sched.t_max();
    let ts: Vec<usize> = (0..batch).map(|_| state.rng.gen_range(1..=t_max)).collect();
    let eps = randn_tensor(&mut state.rng, tape.value(z0).shape());

    // line 4: noisy latent
    let alphas: Vec<f64> = ts.iter().map(|&t| state.sched.alpha(t)).collect();
    let sigmas: Vec<f64> = ts.iter().map(|&t| state.sched.sigma(t)).collect();
    let veps = tape.constant(eps);
    let zt = tape.per_sample_affine(z0, veps, alphas.clone(), sigmas.clone())?;

    // line 5: noise prediction through the adapted UNet
    let eps_hat = state.model.forward(&mut tape, &unet_bind, zt, &ts, cond)?;

    // line 6: reconstruction loss
    let recon = tape.mse(eps_hat, veps)?;

    // line 7: denoised-latent estimate and decode
    let z_pred = match state.cfg.x0_estimate {
        X0Estimate::Paper => tape.sub(zt, eps_hat)?,
        X0Estimate::VariancePreserving => {
            let inv_a: Vec<f64> = alphas.iter().map(|a| 1.0 / a).collect();
            let neg_s_over_a: Vec<f64> = alphas
                .iter()
                .zip(&sigmas)
                .map(|(a, s)| -s / a)
                .collect();
            tape.per_sample_affine(zt, eps_hat, inv_a, neg_s_over_a)?
        }
    };
    let x_gen = state.vae.decode(&mut tape, &vae_bind, z_pred)?;

    // line 8: discriminator update on (real, detached generated)
    let x_gen_value = tape.value(x_gen).clone();
    let x_gen_detached = tape.constant(x_gen_value);
    let p_real = state.disc.forward(&mut tape, &disc_bind, x)?;
    let p_gen_for_d = state.disc.forward(&mut tape, &disc_bind, x_gen_detached)?;
    let l_d = discriminator_loss(&mut tape, p_real, p_gen_for_d)?;
    tape.backward(l_d)?;
    state.disc.store.export_grads(&tape, &disc_bind);
    state.opt_disc.step(&mut state.disc.store)?;

    // line 9: adversarial term against the *updated* discriminator; its
    // weights enter as constants here because only the adapters learn from
    // this loss.
    let disc_bind_updated = state.disc.store.bind_frozen(&mut tape);
    let p_gen = state.disc.forward(&mut tape, &disc_bind_updated, x_gen)?;
    let adv = adversarial_loss(&mut tape, p_gen, state.cfg.adv_target)?;

    // line 10: morphology penalty between clean and generated embeddings
    let z_real = state.lma.encode(&mut tape, &lma_bind, x)?;
    let z_gen = state.lma.encode(&mut tape, &lma_bind, x_gen)?;
    let morph = morph_loss(&mut tape, z_real, z_gen)?;

    // line 11: composite objective, adapter update only
    let gen = total_gen_loss(&mut tape, recon, adv, morph, &state.cfg.loss_weights)?;
    tape.backward(gen)?;
    state.model.store.export_grads(&tape, &unet_bind);
    if let Some(probe) = grad_probe {
        for e in state.model.store.iter() {
            if e.trainable() {
                if let Some(g) = e.tensor().grad() {
                    probe.push((e.name().to_string(), g.to_vec()));
                }
            }
        }
    }
    clip_global_norm(&mut state.model.store, state.cfg.grad_clip);
    state.opt_adapter.step(&mut state.model.store)?;

    state.step += 1;
    Ok(LossBreakdown {
        step: state.step,
        epoch: state.epoch,
        recon: tape.value(recon).data()[0],
        adv: tape.value(adv).data()[0],
        morph: tape.value(morph).data()[0],
        gen_total: tape.value(gen).data()[0],
        disc: tape.value(l_d).data()[0],
    })
}

/// Shuffled minibatch loop from the state's current epoch up to
/// `cfg.epochs`. `on_step` sees every loss row; `on_epoch` runs after each
/// epoch (checkpointing hook).
pub fn phase_b_train(
    state: &mut PhaseBState,
    images: &Tensor,
    conds: &Tensor,
    mut on_step: impl FnMut(&LossBreakdown),
    mut on_epoch: impl FnMut(&PhaseBState) -> Result<()>,
) -> Result<()> {
    let n = images.shape()[0];
    if conds.shape()[0] != n {
        return Err(Error::InvalidArgument(
            "conditions and images disagree on count".into(),
        ));
    }
    let seed = state.cfg.seed;
    for epoch in state.epoch..state.cfg.epochs {
        let mut shuffle =
            seeded_rng(seed, streams::SHUFFLE + streams::ADAPT_TRAIN * 0x1_0000 + epoch as u64);
        let order = shuffled_indices(&mut shuffle, n);
        for chunk in order.chunks(state.cfg.batch_size) {
            let x = gather_batch(images, chunk);
            let c = gather_batch(conds, chunk);
            let row = phase_b_step(state, &x, &c)?;
            on_step(&row);
        }
        state.epoch = epoch + 1;
        on_epoch(state)?;
    }
    Ok(())
}
