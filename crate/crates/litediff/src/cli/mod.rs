//! Command-line orchestration of the experiment lifecycle.

mod config;
mod experiments;

pub use config::ExperimentConfig;
pub use experiments::{
    cmd_ablate_hooks, cmd_adapt, cmd_datagen, cmd_datasize, cmd_evaluate, cmd_pretrain_base,
    cmd_sample, cmd_train_lma, ensure_encoder, evaluate_model, run_adapt_arm, target_images,
    AdaptResult, ArmSource, DatagenResult, BASE_SEED_OFFSET, EVAL_SEED_OFFSET,
};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "litediff",
    about = "Adapter-based fine-tuning of a frozen toy latent-diffusion model, with a synthetic-data experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (flat key = value lines)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel workers for multi-arm commands
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PGM files plus a manifest
    Datagen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain and freeze the base stack (image codec + denoiser)
    PretrainBase {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train and freeze the morphology autoencoder
    TrainLma {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Adapter + discriminator training against the frozen base
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from a training-state checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample images from the (optionally adapted) model
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of images (defaults to the config's sample_count)
        #[arg(long)]
        count: Option<usize>,
        /// Sampling seed (defaults to the config's sample_seed)
        #[arg(long)]
        sample_seed: Option<u64>,
    },
    /// Score arms into a comparison report; arms are `name=@base` or
    /// `name=path/to/adapter.ldck`
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        arms: Vec<String>,
    },
    /// One training arm per hooking pattern, reported together
    AblateHooks {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Training arms over the data-size ladder, reported together
    Datasize {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn parse_arm_spec(spec: &str) -> Result<(String, ArmSource)> {
    let (name, src) = spec.split_once('=').ok_or_else(|| {
        Error::InvalidArgument(format!("arm `{spec}` must be name=@base or name=path"))
    })?;
    let source = if src == "@base" {
        ArmSource::Base
    } else {
        ArmSource::Adapter(PathBuf::from(src))
    };
    Ok((name.to_string(), source))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Datagen { common } => {
            let cfg = common.load()?;
            let result = cmd_datagen(&cfg)?;
            println!(
                "wrote {} images and {}",
                result.files.len(),
                result.manifest.display()
            );
        }
        Command::PretrainBase { common } => {
            let cfg = common.load()?;
            let path = cmd_pretrain_base(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::TrainLma { common } => {
            let cfg = common.load()?;
            let path = cmd_train_lma(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Adapt { common, resume } => {
            let cfg = common.load()?;
            let result = cmd_adapt(&cfg, resume.as_deref())?;
            println!(
                "wrote {} after {} steps ({:.1}s)",
                result.adapter_ckpt.display(),
                result.steps,
                result.wall_seconds
            );
        }
        Command::Sample {
            common,
            count,
            sample_seed,
        } => {
            let cfg = common.load()?;
            let count = count.unwrap_or(cfg.sample_count);
            let seed = sample_seed.unwrap_or(cfg.sample_seed);
            let files = cmd_sample(&cfg, count, seed)?;
            println!("wrote {} files under samples/", files.len());
        }
        Command::Evaluate { common, arms } => {
            let cfg = common.load()?;
            let mut parsed: Vec<(String, ArmSource)> = arms
                .iter()
                .map(|s| parse_arm_spec(s))
                .collect::<Result<_>>()?;
            if parsed.is_empty() {
                parsed.push(("base".to_string(), ArmSource::Base));
                if let Some(p) = &cfg.adapter_ckpt {
                    parsed.push(("adapted".to_string(), ArmSource::Adapter(p.clone())));
                }
            }
            let report = cmd_evaluate(&cfg, &parsed)?;
            print!("{}", report.to_text_table());
        }
        Command::AblateHooks { common } => {
            let jobs = common.jobs;
            let cfg = common.load()?;
            let report = cmd_ablate_hooks(&cfg, jobs)?;
            println!("reference arm: all");
            print!("{}", report.to_text_table());
        }
        Command::Datasize { common } => {
            let jobs = common.jobs;
            let cfg = common.load()?;
            let report = cmd_datasize(&cfg, jobs)?;
            print!("{}", report.to_text_table());
        }
    }
    Ok(())
}

/// Binary entry point; returns the process exit code (0 success, 2 for
/// config/usage problems, 1 for runtime failures).
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::UnknownConfigKey(_) | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
