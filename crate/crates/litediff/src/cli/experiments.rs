//! Command implementations behind the CLI: each takes a parsed
//! [`ExperimentConfig`], works through the filesystem, and returns structured
//! results so tests can drive them directly.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::adaptation::{HookPattern, HookedUnet, LmaModel, ABLATION_PATTERNS};
use crate::autodiff::Tensor;
use crate::cli::config::ExperimentConfig;
use crate::data::{dataset_tensor, generate, save_pgm, GeneratorParams, ImageGray};
use crate::diffusion::{
    pretrain_base, sample_batch, BaseModel, ConditioningVector, DiffusionSchedule, PretrainConfig,
    Vae,
};
use crate::error::{Error, Result};
use crate::metrics::{
    fid_desk, fit_eval_encoder, paired, perceptual_proxy, ArmMetrics, EncoderFitConfig,
    EvalEncoder, MetricsReport,
};
use crate::training::{
    into_hooked, load_adapters_into, load_base, load_lma, phase_a_train, phase_b_train,
    resume_train_state, save_adapters, save_base, save_lma, save_train_state, CheckpointFile,
    CheckpointWriter, PhaseAConfig, PhaseBState, LOSS_CSV_HEADER,
};

/// Seed offsets deriving auxiliary datasets from `data_seed`; they keep the
/// evaluation pool and the base-domain corpus disjoint from the target
/// training images by construction.
pub const EVAL_SEED_OFFSET: u64 = 1;
pub const BASE_SEED_OFFSET: u64 = 10;

fn write_config_sidecar(cfg: &ExperimentConfig, artifact: &Path) -> Result<()> {
    let mut name = artifact
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    name.push_str(".config.txt");
    let path = artifact.with_file_name(name);
    fs::write(path, cfg.to_text())?;
    Ok(())
}

pub fn target_images(cfg: &ExperimentConfig, n: usize) -> Result<Tensor> {
    let items = generate(&GeneratorParams {
        domain: cfg.data_domain,
        n,
        seed: cfg.data_seed,
        resolution: cfg.data_resolution,
    })?;
    Ok(dataset_tensor(&items)?.0)
}

fn eval_pool(cfg: &ExperimentConfig) -> Result<(Tensor, Tensor)> {
    let items = generate(&GeneratorParams {
        domain: cfg.data_domain,
        n: cfg.eval_n,
        seed: cfg.data_seed + EVAL_SEED_OFFSET,
        resolution: cfg.data_resolution,
    })?;
    let (all, _) = dataset_tensor(&items)?;
    let fit_idx: Vec<usize> = (0..cfg.encoder_fit_count).collect();
    let ref_idx: Vec<usize> =
        (cfg.encoder_fit_count..cfg.encoder_fit_count + cfg.fid_ref_count).collect();
    Ok((
        crate::util::gather_batch(&all, &fit_idx),
        crate::util::gather_batch(&all, &ref_idx),
    ))
}

fn base_images(cfg: &ExperimentConfig) -> Result<Tensor> {
    let items = generate(&GeneratorParams {
        domain: cfg.base_domain,
        n: cfg.base_n,
        seed: cfg.data_seed + BASE_SEED_OFFSET,
        resolution: cfg.data_resolution,
    })?;
    Ok(dataset_tensor(&items)?.0)
}

// ---- datagen ---------------------------------------------------------------

pub struct DatagenResult {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
}

pub fn cmd_datagen(cfg: &ExperimentConfig) -> Result<DatagenResult> {
    let dir = cfg.out_dir.join("data");
    fs::create_dir_all(&dir)?;
    let items = generate(&GeneratorParams {
        domain: cfg.data_domain,
        n: cfg.data_n,
        seed: cfg.data_seed,
        resolution: cfg.data_resolution,
    })?;
    let mut files = Vec::with_capacity(items.len());
    let mut manifest = String::from("file,class,seed\n");
    for (i, (img, class)) in items.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        let path = dir.join(&name);
        save_pgm(img, &path, cfg.data_seed)?;
        manifest.push_str(&format!("{name},{class},{}\n", cfg.data_seed));
        files.push(path);
    }
    let manifest_path = dir.join("manifest.csv");
    fs::write(&manifest_path, manifest)?;
    write_config_sidecar(cfg, &manifest_path)?;
    Ok(DatagenResult {
        files,
        manifest: manifest_path,
    })
}

// ---- pretraining and phase A -------------------------------------------------

pub fn cmd_pretrain_base(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let images = base_images(cfg)?;
    let pre_cfg = PretrainConfig {
        vae_epochs: cfg.vae_epochs,
        unet_epochs: cfg.base_unet_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        spec: cfg.unet_spec(),
        schedule_t: cfg.schedule_t,
        beta_start: cfg.beta_start,
        beta_end: cfg.beta_end,
    };
    let (base, report) = pretrain_base(&images, &pre_cfg)?;
    // freeze contract on the produced checkpoint
    if base.vae.store.iter().any(|e| e.trainable())
        || base.unet_store.iter().any(|e| e.trainable())
    {
        return Err(Error::FrozenMutation(
            "pretrained base has trainable entries".into(),
        ));
    }
    let path = cfg.resolve(&cfg.base_ckpt);
    save_base(&path, &base, cfg.to_map())?;
    write_config_sidecar(cfg, &path)?;
    let log_path = cfg.out_dir.join("pretrain_loss.csv");
    let mut log = String::from("phase,epoch,loss\n");
    for (e, v) in report.vae_loss.iter().enumerate() {
        log.push_str(&format!("vae,{e},{v:?}\n"));
    }
    for (e, v) in report.unet_loss.iter().enumerate() {
        log.push_str(&format!("unet,{e},{v:?}\n"));
    }
    fs::write(log_path, log)?;
    Ok(path)
}

pub fn cmd_train_lma(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let images = target_images(cfg, cfg.data_n)?;
    let (lma, log) = phase_a_train(
        &images,
        &PhaseAConfig {
            epochs: cfg.lma_epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.lma_learning_rate,
            seed: cfg.seed,
            latent_dim: cfg.lma_latent_dim,
        },
    )?;
    let path = cfg.resolve(&cfg.lma_ckpt);
    save_lma(&path, &lma, cfg.to_map())?;
    write_config_sidecar(cfg, &path)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, v) in log.iter().enumerate() {
        csv.push_str(&format!("{e},{v:?}\n"));
    }
    fs::write(cfg.out_dir.join("lma_loss.csv"), csv)?;
    Ok(path)
}

// ---- phase B ----------------------------------------------------------------

pub struct AdaptResult {
    pub adapter_ckpt: PathBuf,
    pub loss_csv: PathBuf,
    pub wall_seconds: f64,
    pub steps: usize,
}

/// Runs one adapter-training arm fully in memory and returns the final
/// state plus collected loss rows and wall time.
pub fn run_adapt_arm(
    cfg: &ExperimentConfig,
    base: BaseModel,
    lma: LmaModel,
    mut on_epoch: impl FnMut(&PhaseBState) -> Result<()>,
) -> Result<(PhaseBState, Vec<crate::training::LossBreakdown>, f64)> {
    let images = target_images(cfg, cfg.data_n)?;
    let conds = Tensor::zeros(&[cfg.data_n, cfg.cond_dim]);
    let mut state = PhaseBState::new(base, lma, &cfg.hook_pattern, cfg.train_config())?;
    let mut rows = Vec::new();
    let start = Instant::now();
    phase_b_train(
        &mut state,
        &images,
        &conds,
        |row| rows.push(*row),
        |s| on_epoch(s),
    )?;
    let wall = start.elapsed().as_secs_f64();
    Ok((state, rows, wall))
}

pub fn cmd_adapt(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<AdaptResult> {
    fs::create_dir_all(&cfg.out_dir)?;
    let (base, _) = load_base(&cfg.resolve(&cfg.base_ckpt))?;
    let (lma, _) = load_lma(&cfg.resolve(&cfg.lma_ckpt))?;
    let images = target_images(cfg, cfg.data_n)?;
    let conds = Tensor::zeros(&[cfg.data_n, cfg.cond_dim]);

    let mut state = PhaseBState::new(base, lma, &cfg.hook_pattern, cfg.train_config())?;
    if let Some(path) = resume {
        let ckpt = CheckpointFile::read(path)?;
        resume_train_state(&mut state, &ckpt)?;
    }

    let mut rows = Vec::new();
    let cfg_map = cfg.to_map();
    let out_dir = cfg.out_dir.clone();
    let start = Instant::now();
    phase_b_train(
        &mut state,
        &images,
        &conds,
        |row| rows.push(*row),
        |s| {
            let path = out_dir.join(format!("state_epoch_{:03}.ldck", s.epoch));
            save_train_state(&path, s, cfg_map.clone())
        },
    )?;
    let wall = start.elapsed().as_secs_f64();

    let adapter_ckpt = cfg.out_dir.join(format!("adapter_{}.ldck", cfg.arm_name));
    save_adapters(&adapter_ckpt, &state.model, cfg.to_map())?;
    write_config_sidecar(cfg, &adapter_ckpt)?;

    let loss_csv = cfg.out_dir.join(format!("loss_{}.csv", cfg.arm_name));
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    fs::write(&loss_csv, csv)?;

    // wall clock lives in its own sidecar so checkpoints stay deterministic
    let timing_dir = cfg.out_dir.join("timings");
    fs::create_dir_all(&timing_dir)?;
    fs::write(
        timing_dir.join(format!("{}.txt", cfg.arm_name)),
        format!("{wall:?}\n"),
    )?;

    Ok(AdaptResult {
        adapter_ckpt,
        loss_csv,
        wall_seconds: wall,
        steps: rows.len(),
    })
}

// ---- sampling ----------------------------------------------------------------

pub fn cmd_sample(cfg: &ExperimentConfig, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let (base, _) = load_base(&cfg.resolve(&cfg.base_ckpt))?;
    let (mut model, vae, sched) = into_hooked(base);
    if let Some(p) = &cfg.adapter_ckpt {
        let ckpt = CheckpointFile::read(&cfg.resolve(p))?;
        load_adapters_into(&mut model, &ckpt)?;
    }
    let dir = cfg.out_dir.join("samples");
    fs::create_dir_all(&dir)?;
    let cond = ConditioningVector::null(cfg.cond_dim);
    let stack = sample_batch(&model, &vae, &sched, &cond, seed, count)?;
    let mut files = Vec::with_capacity(count + 1);
    for i in 0..count {
        let img = ImageGray::from_tensor_plane(&stack, i);
        let path = dir.join(format!("sample_{i:03}.pgm"));
        save_pgm(&img, &path, seed)?;
        files.push(path);
    }
    let grid = tile_grid(&stack)?;
    let grid_path = dir.join("grid.pgm");
    save_pgm(&grid, &grid_path, seed)?;
    write_config_sidecar(cfg, &grid_path)?;
    files.push(grid_path);
    Ok(files)
}

fn tile_grid(stack: &Tensor) -> Result<ImageGray> {
    let n = stack.shape()[0];
    let r = stack.shape()[2];
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (w, h) = (cols * r, rows * r);
    let mut pixels = vec![-1.0; w * h];
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..r {
            for x in 0..r {
                pixels[(gy * r + y) * w + gx * r + x] = stack.data()[(i * r + y) * r + x];
            }
        }
    }
    ImageGray::new(w, h, pixels)
}

// ---- evaluation ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ArmSource {
    /// The frozen base with no adapters.
    Base,
    /// Adapters loaded from a checkpoint onto the base.
    Adapter(PathBuf),
}

/// Loads the cached evaluation encoder or fits and caches it. All arms of a
/// comparison must go through the same cached instance.
pub fn ensure_encoder(cfg: &ExperimentConfig) -> Result<EvalEncoder> {
    let path = cfg.resolve(&cfg.encoder_ckpt);
    if path.exists() {
        return load_encoder(&path);
    }
    let (fit_slice, _) = eval_pool(cfg)?;
    let enc = fit_eval_encoder(
        &fit_slice,
        &EncoderFitConfig {
            epochs: cfg.encoder_epochs,
            batch_size: cfg.batch_size,
            learning_rate: 1e-3,
            seed: cfg.seed,
        },
    )?;
    save_encoder(&path, &enc, cfg)?;
    Ok(enc)
}

fn save_encoder(path: &Path, enc: &EvalEncoder, cfg: &ExperimentConfig) -> Result<()> {
    let mut w = CheckpointWriter::new("encoder");
    w.set_config(cfg.to_map());
    w.meta("image_resolution", enc.image_resolution());
    w.meta("checksum", enc.checksum());
    w.store(&enc.store, "enc.");
    w.write(path)
}

fn load_encoder(path: &Path) -> Result<EvalEncoder> {
    let ckpt = CheckpointFile::read(path)?;
    if ckpt.manifest.kind != "encoder" {
        return Err(Error::Checkpoint(format!(
            "expected an encoder checkpoint, found `{}`",
            ckpt.manifest.kind
        )));
    }
    let resolution: usize = ckpt
        .require_meta("image_resolution")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad image_resolution".into()))?;
    let mut rng = crate::util::seeded_rng(0, crate::util::streams::ENCODER_INIT);
    let mut enc = EvalEncoder::new(resolution, &mut rng)?;
    ckpt.apply_prefix(&mut enc.store, "enc.")?;
    enc.store.freeze_all();
    Ok(enc)
}

/// Scores one model: FID of its samples against the held-out reference set,
/// the perceptual proxy over paired images, and bookkeeping columns.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    enc: &EvalEncoder,
    model: &HookedUnet,
    vae: &Vae,
    sched: &DiffusionSchedule,
    arm: &str,
    wall_seconds: f64,
) -> Result<ArmMetrics> {
    let (_, fid_ref) = eval_pool(cfg)?;
    let cond = ConditioningVector::null(cfg.cond_dim);
    let samples = sample_batch(model, vae, sched, &cond, cfg.sample_seed, cfg.sample_count)?;
    let fid = fid_desk(&fid_ref, &samples, enc)?;
    let pair_count = cfg.sample_count.min(cfg.fid_ref_count).min(32);
    let proxy = perceptual_proxy(&paired(&fid_ref, &samples, pair_count), enc)?;
    Ok(ArmMetrics {
        arm: arm.to_string(),
        fid_desk: fid,
        perceptual_proxy: proxy,
        trainable_fraction: model.trainable_fraction(),
        wall_seconds,
        seed: cfg.seed,
        encoder_checksum: enc.checksum(),
    })
}

fn arm_wall_seconds(cfg: &ExperimentConfig, arm: &str) -> f64 {
    let path = cfg.out_dir.join("timings").join(format!("{arm}.txt"));
    fs::read_to_string(path)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0.0)
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    arms: &[(String, ArmSource)],
) -> Result<MetricsReport> {
    if arms.is_empty() {
        return Err(Error::InvalidArgument("evaluate needs at least one arm".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let enc = ensure_encoder(cfg)?;
    let mut metrics = Vec::with_capacity(arms.len());
    for (name, source) in arms {
        let (base, _) = load_base(&cfg.resolve(&cfg.base_ckpt))?;
        let (mut model, vae, sched) = into_hooked(base);
        if let ArmSource::Adapter(path) = source {
            let ckpt = CheckpointFile::read(&cfg.resolve(path))?;
            load_adapters_into(&mut model, &ckpt)?;
        }
        let wall = arm_wall_seconds(cfg, name);
        metrics.push(evaluate_model(cfg, &enc, &model, &vae, &sched, name, wall)?);
    }
    let report = MetricsReport::new(metrics)?;
    let path = cfg.out_dir.join("report.csv");
    fs::write(&path, report.to_csv())?;
    write_config_sidecar(cfg, &path)?;
    Ok(report)
}

// ---- ablations -------------------------------------------------------------

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

/// One Phase B run per hooking pattern, sharing base, morphology model, data
/// and seed; emits a seven-row report. The all-blocks arm is the reference.
pub fn cmd_ablate_hooks(cfg: &ExperimentConfig, jobs: usize) -> Result<MetricsReport> {
    fs::create_dir_all(cfg.out_dir.join("ablate"))?;
    let enc = ensure_encoder(cfg)?;
    let base_path = cfg.resolve(&cfg.base_ckpt);
    let lma_path = cfg.resolve(&cfg.lma_ckpt);

    let arms: Vec<HookPattern> = ABLATION_PATTERNS.to_vec();
    let results: Result<Vec<ArmMetrics>> = with_pool(jobs, || {
        arms.par_iter()
            .map(|pattern| {
                let mut arm_cfg = cfg.clone();
                arm_cfg.hook_pattern = pattern.clone();
                arm_cfg.arm_name = pattern.descriptor();
                let (base, _) = load_base(&base_path)?;
                let (lma, _) = load_lma(&lma_path)?;
                let (state, rows, wall) = run_adapt_arm(&arm_cfg, base, lma, |_| Ok(()))?;

                let ckpt_path = cfg
                    .out_dir
                    .join("ablate")
                    .join(format!("adapter_{}.ldck", pattern.descriptor()));
                save_adapters(&ckpt_path, &state.model, arm_cfg.to_map())?;
                let mut csv = String::from(LOSS_CSV_HEADER);
                csv.push('\n');
                for row in &rows {
                    csv.push_str(&row.csv_row());
                    csv.push('\n');
                }
                fs::write(
                    cfg.out_dir
                        .join("ablate")
                        .join(format!("loss_{}.csv", pattern.descriptor())),
                    csv,
                )?;

                evaluate_model(
                    &arm_cfg,
                    &enc,
                    &state.model,
                    &state.vae,
                    &state.sched,
                    &pattern.descriptor(),
                    wall,
                )
            })
            .collect()
    });
    let report = MetricsReport::new(results?)?;
    let path = cfg.out_dir.join("ablate_report.csv");
    fs::write(&path, report.to_csv())?;
    fs::write(
        cfg.out_dir.join("ablate_report.reference.txt"),
        "reference_arm = all\n",
    )?;
    write_config_sidecar(cfg, &path)?;
    Ok(report)
}

/// Adapter training over nested target-set sizes; reports FID and the
/// per-arm training wall clock.
pub fn cmd_datasize(cfg: &ExperimentConfig, jobs: usize) -> Result<MetricsReport> {
    fs::create_dir_all(cfg.out_dir.join("datasize"))?;
    let enc = ensure_encoder(cfg)?;
    let base_path = cfg.resolve(&cfg.base_ckpt);
    let lma_path = cfg.resolve(&cfg.lma_ckpt);

    let sizes = cfg.datasize_list.clone();
    let results: Result<Vec<ArmMetrics>> = with_pool(jobs, || {
        sizes
            .par_iter()
            .map(|&n| {
                let mut arm_cfg = cfg.clone();
                arm_cfg.data_n = n;
                arm_cfg.arm_name = format!("n{n}");
                let (base, _) = load_base(&base_path)?;
                let (lma, _) = load_lma(&lma_path)?;
                let (state, _, wall) = run_adapt_arm(&arm_cfg, base, lma, |_| Ok(()))?;
                let ckpt_path = cfg
                    .out_dir
                    .join("datasize")
                    .join(format!("adapter_n{n}.ldck"));
                save_adapters(&ckpt_path, &state.model, arm_cfg.to_map())?;
                evaluate_model(
                    &arm_cfg,
                    &enc,
                    &state.model,
                    &state.vae,
                    &state.sched,
                    &format!("n{n}"),
                    wall,
                )
            })
            .collect()
    });
    let report = MetricsReport::new(results?)?;
    let path = cfg.out_dir.join("datasize_report.csv");
    fs::write(&path, report.to_csv())?;
    write_config_sidecar(cfg, &path)?;
    Ok(report)
}
