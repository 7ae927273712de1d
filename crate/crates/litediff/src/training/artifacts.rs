//! Save/load of the concrete artifact kinds on top of the raw checkpoint
//! format: the frozen base stack, the frozen morphology model, adapter-only
//! checkpoints, and resumable training state.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;

use crate::adaptation::{AdapterActivation, HookPattern, HookedUnet, LmaModel};
use crate::diffusion::{BaseModel, DiffusionSchedule, UNetSpec, Unet, Vae};
use crate::error::{Error, Result};
use crate::layers::{ParamStore, SpectralState};
use crate::training::checkpoint::{CheckpointFile, CheckpointWriter};
use crate::training::phase_b::PhaseBState;
use crate::util::{seeded_rng, streams};

fn parse<T: std::str::FromStr>(ckpt: &CheckpointFile, key: &str) -> Result<T> {
    ckpt.require_meta(key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("meta key `{key}` unparsable")))
}

fn spec_into_meta(w: &mut CheckpointWriter, spec: &UNetSpec) {
    let chans: Vec<String> = spec.down_channels.iter().map(usize::to_string).collect();
    w.meta("spec_down_channels", chans.join(","));
    w.meta("spec_mid_channels", spec.mid_channels);
    w.meta("spec_latent_channels", spec.latent_channels);
    w.meta("spec_base_resolution", spec.base_resolution);
    w.meta("spec_t_embed_dim", spec.t_embed_dim);
    w.meta("spec_cond_dim", spec.cond_dim);
}

fn spec_from_meta(ckpt: &CheckpointFile) -> Result<UNetSpec> {
    let chans: Result<Vec<usize>> = ckpt
        .require_meta("spec_down_channels")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Checkpoint("bad spec_down_channels".into()))
        })
        .collect();
    Ok(UNetSpec {
        down_channels: chans?,
        mid_channels: parse(ckpt, "spec_mid_channels")?,
        latent_channels: parse(ckpt, "spec_latent_channels")?,
        base_resolution: parse(ckpt, "spec_base_resolution")?,
        t_embed_dim: parse(ckpt, "spec_t_embed_dim")?,
        cond_dim: parse(ckpt, "spec_cond_dim")?,
    })
}

pub fn save_base(path: &Path, base: &BaseModel, config: BTreeMap<String, String>) -> Result<()> {
    let mut w = CheckpointWriter::new("base");
    w.set_config(config);
    spec_into_meta(&mut w, &base.unet.spec);
    w.meta("schedule_t", base.sched.t_max());
    w.meta("beta_start", format!("{:?}", base.beta_start));
    w.meta("beta_end", format!("{:?}", base.beta_end));
    w.store(&base.vae.store, "vae.");
    w.store(&base.unet_store, "unet.");
    w.write(path)
}

pub fn load_base(path: &Path) -> Result<(BaseModel, CheckpointFile)> {
    let ckpt = CheckpointFile::read(path)?;
    if ckpt.manifest.kind != "base" {
        return Err(Error::Checkpoint(format!(
            "expected a base checkpoint, found kind `{}`",
            ckpt.manifest.kind
        )));
    }
    let spec = spec_from_meta(&ckpt)?;
    let t: usize = parse(&ckpt, "schedule_t")?;
    let beta_start: f64 = parse(&ckpt, "beta_start")?;
    let beta_end: f64 = parse(&ckpt, "beta_end")?;
    let sched = DiffusionSchedule::new(t, beta_start, beta_end)?;

    let mut vae_rng = seeded_rng(0, streams::VAE_INIT);
    let mut vae = Vae::new(spec.image_resolution(), spec.latent_channels, &mut vae_rng)?;
    ckpt.apply_prefix(&mut vae.store, "vae.")?;
    vae.store.freeze_all();

    let mut unet_rng = seeded_rng(0, streams::UNET_INIT);
    let mut store = ParamStore::new();
    let unet = Unet::new(&mut store, &spec, &mut unet_rng, true)?;
    ckpt.apply_prefix(&mut store, "unet.")?;
    store.freeze_all();

    Ok((
        BaseModel {
            vae,
            unet_store: store,
            unet,
            sched,
            beta_start,
            beta_end,
        },
        ckpt,
    ))
}

pub fn save_lma(path: &Path, lma: &LmaModel, config: BTreeMap<String, String>) -> Result<()> {
    let mut w = CheckpointWriter::new("lma");
    w.set_config(config);
    w.meta("latent_dim", lma.latent_dim());
    w.meta("image_resolution", lma.image_resolution());
    w.store(&lma.store, "lma.");
    w.write(path)
}

pub fn load_lma(path: &Path) -> Result<(LmaModel, CheckpointFile)> {
    let ckpt = CheckpointFile::read(path)?;
    if ckpt.manifest.kind != "lma" {
        return Err(Error::Checkpoint(format!(
            "expected an lma checkpoint, found kind `{}`",
            ckpt.manifest.kind
        )));
    }
    let latent_dim: usize = parse(&ckpt, "latent_dim")?;
    let resolution: usize = parse(&ckpt, "image_resolution")?;
    let mut rng = seeded_rng(0, streams::LMA_INIT);
    let mut lma = LmaModel::new(resolution, latent_dim, &mut rng)?;
    ckpt.apply_prefix(&mut lma.store, "lma.")?;
    lma.store.freeze_all();
    Ok((lma, ckpt))
}

/// Adapter-only checkpoint: just the adapter entries plus the pattern
/// descriptor, portable across identical base checkpoints.
pub fn save_adapters(
    path: &Path,
    model: &HookedUnet,
    config: BTreeMap<String, String>,
) -> Result<()> {
    let pattern = model
        .pattern()
        .ok_or_else(|| Error::InvalidArgument("model has no adapters attached".into()))?;
    let activation = model
        .adapter_activation()
        .unwrap_or(AdapterActivation::LeakyRelu);
    let mut w = CheckpointWriter::new("adapter");
    w.set_config(config);
    w.meta("pattern", pattern.descriptor());
    w.meta("adapter_activation", activation.descriptor());
    w.meta(
        "trainable_fraction",
        format!("{:?}", model.trainable_fraction()),
    );
    w.store(&model.store, "adapter.");
    w.write(path)
}

/// Attaches adapters per the checkpoint's pattern and restores their values.
/// The model must still be bare.
pub fn load_adapters_into(model: &mut HookedUnet, ckpt: &CheckpointFile) -> Result<()> {
    if ckpt.manifest.kind != "adapter" && ckpt.manifest.kind != "train_state" {
        return Err(Error::Checkpoint(format!(
            "expected adapter or train_state checkpoint, found `{}`",
            ckpt.manifest.kind
        )));
    }
    let pattern = HookPattern::from_descriptor(ckpt.require_meta("pattern")?)?;
    let activation = match ckpt.require_meta("adapter_activation")? {
        "relu" => AdapterActivation::Relu,
        _ => AdapterActivation::LeakyRelu,
    };
    model.attach_adapters(&pattern, activation)?;
    ckpt.apply_prefix(&mut model.store, "adapter.")?;
    Ok(())
}

/// Full training-state checkpoint: adapters, discriminator, both optimizers'
/// moments, spectral power-iteration state, and the noise-stream position.
/// Everything needed for a bit-exact resume.
pub fn save_train_state(
    path: &Path,
    state: &PhaseBState,
    config: BTreeMap<String, String>,
) -> Result<()> {
    let pattern = state
        .model
        .pattern()
        .ok_or_else(|| Error::InvalidArgument("state has no adapters".into()))?;
    let mut w = CheckpointWriter::new("train_state");
    w.set_config(config);
    w.meta("pattern", pattern.descriptor());
    w.meta(
        "adapter_activation",
        state.cfg.adapter_activation.descriptor(),
    );
    w.meta("epoch", state.epoch);
    w.meta("step", state.step);
    w.meta("rng_word_pos", state.rng.get_word_pos());
    w.meta("opt_g_t", state.opt_adapter.step_count());
    w.meta("opt_d_t", state.opt_disc.step_count());
    w.store(&state.model.store, "adapter.");
    w.store(&state.disc.store, "disc.");
    for (key, data) in state.opt_adapter.state_entries(&state.model.store) {
        w.tensor(&format!("opt_g.{key}"), &[data.len().max(1)], false, &data);
    }
    for (key, data) in state.opt_disc.state_entries(&state.disc.store) {
        w.tensor(&format!("opt_d.{key}"), &[data.len().max(1)], false, &data);
    }
    for (i, s) in state.disc.spectral_states().iter().enumerate() {
        w.tensor(&format!("spectral.u.{i}"), &[s.u().len()], false, s.u());
    }
    w.meta("spectral_count", state.disc.spectral_states().len());
    w.write(path)
}

/// Restores a state previously saved with [`save_train_state`]. The state
/// must have been freshly constructed from the same base, morphology model,
/// pattern and config.
pub fn resume_train_state(state: &mut PhaseBState, ckpt: &CheckpointFile) -> Result<()> {
    if ckpt.manifest.kind != "train_state" {
        return Err(Error::Checkpoint(format!(
            "expected train_state checkpoint, found `{}`",
            ckpt.manifest.kind
        )));
    }
    let saved_pattern = ckpt.require_meta("pattern")?;
    let current = state
        .model
        .pattern()
        .map(HookPattern::descriptor)
        .unwrap_or_default();
    if saved_pattern != current {
        return Err(Error::Checkpoint(format!(
            "checkpoint pattern `{saved_pattern}` does not match state `{current}`"
        )));
    }
    ckpt.apply_prefix(&mut state.model.store, "adapter.")?;
    ckpt.apply_prefix(&mut state.disc.store, "disc.")?;

    let g_t: u64 = parse(ckpt, "opt_g_t")?;
    let d_t: u64 = parse(ckpt, "opt_d_t")?;
    state.opt_adapter.restore_state(&state.model.store, g_t, |key| {
        ckpt.tensor_data(&format!("opt_g.{key}")).map(<[f64]>::to_vec)
    });
    state.opt_disc.restore_state(&state.disc.store, d_t, |key| {
        ckpt.tensor_data(&format!("opt_d.{key}")).map(<[f64]>::to_vec)
    });

    let count: usize = parse(ckpt, "spectral_count")?;
    let mut spectral = Vec::with_capacity(count);
    for i in 0..count {
        let u = ckpt
            .tensor_data(&format!("spectral.u.{i}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing spectral.u.{i}")))?;
        spectral.push(SpectralState::from_parts(u.to_vec(), 1));
    }
    state.disc.set_spectral_states(spectral);

    state.epoch = parse(ckpt, "epoch")?;
    state.step = parse(ckpt, "step")?;
    let word_pos: u128 = parse(ckpt, "rng_word_pos")?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(state.cfg.seed);
    rng.set_stream(streams::ADAPT_TRAIN);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(())
}

/// Unpacks a frozen base into the sampling-ready trio.
pub fn into_hooked(base: BaseModel) -> (HookedUnet, Vae, DiffusionSchedule) {
    (
        HookedUnet::bare(base.unet_store, base.unet),
        base.vae,
        base.sched,
    )
}
