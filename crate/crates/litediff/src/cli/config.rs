use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::adaptation::{AdapterActivation, AdvTarget, HookPattern, LossWeights};
use crate::data::Domain;
use crate::diffusion::UNetSpec;
use crate::error::{Error, Result};
use crate::training::{TrainConfig, X0Estimate};

/// Everything one experiment arm needs, parsed from a flat `key = value`
/// text file. `#` starts a comment; unknown keys are hard errors. The full
/// set is serialized into checkpoint manifests and report sidecars for
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arm_name: String,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub data_domain: Domain,
    pub data_n: usize,
    pub data_resolution: usize,
    pub data_seed: u64,
    pub eval_n: usize,
    pub base_domain: Domain,
    pub base_n: usize,

    pub down_channels: Vec<usize>,
    pub mid_channels: usize,
    pub latent_channels: usize,
    pub base_resolution: usize,
    pub t_embed_dim: usize,
    pub cond_dim: usize,

    pub schedule_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub vae_epochs: usize,
    pub base_unet_epochs: usize,

    pub lma_epochs: usize,
    pub lma_latent_dim: usize,
    pub lma_learning_rate: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_adv: f64,
    pub lambda_morph: f64,
    pub hook_pattern: HookPattern,
    pub x0_estimate: X0Estimate,
    pub adv_target: AdvTarget,
    pub adapter_activation: AdapterActivation,
    pub grad_clip: f64,

    pub sample_count: usize,
    pub fid_ref_count: usize,
    pub encoder_fit_count: usize,
    pub encoder_epochs: usize,
    pub sample_seed: u64,

    pub base_ckpt: PathBuf,
    pub lma_ckpt: PathBuf,
    pub encoder_ckpt: PathBuf,
    pub adapter_ckpt: Option<PathBuf>,

    pub datasize_list: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arm_name: "arm".into(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            data_domain: Domain::MorphLungs,
            data_n: 2000,
            data_resolution: 64,
            data_seed: 100,
            eval_n: 640,
            base_domain: Domain::BaseTextures,
            base_n: 2000,
            down_channels: vec![16, 32, 64],
            mid_channels: 64,
            latent_channels: 4,
            base_resolution: 16,
            t_embed_dim: 32,
            cond_dim: 8,
            schedule_t: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            vae_epochs: 15,
            base_unet_epochs: 12,
            lma_epochs: 40,
            lma_latent_dim: 32,
            lma_learning_rate: 1e-4,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-4,
            lambda_adv: 0.1,
            lambda_morph: 0.001,
            hook_pattern: HookPattern::All,
            x0_estimate: X0Estimate::Paper,
            adv_target: AdvTarget::One,
            adapter_activation: AdapterActivation::LeakyRelu,
            grad_clip: 1.0,
            sample_count: 96,
            fid_ref_count: 128,
            encoder_fit_count: 500,
            encoder_epochs: 12,
            sample_seed: 9000,
            base_ckpt: PathBuf::from("base.ldck"),
            lma_ckpt: PathBuf::from("lma.ldck"),
            encoder_ckpt: PathBuf::from("encoder.ldck"),
            adapter_ckpt: None,
            datasize_list: vec![250, 500, 1000, 2000],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

impl ExperimentConfig {
    /// Parses file content over the defaults.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arm_name" => self.arm_name = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value)?,
            "data_domain" => {
                self.data_domain = Domain::from_descriptor(value)
                    .ok_or_else(|| Error::Config(format!("key `data_domain`: unknown domain `{value}`")))?
            }
            "data_n" => self.data_n = parse_num(key, value)?,
            "data_resolution" => self.data_resolution = parse_num(key, value)?,
            "data_seed" => self.data_seed = parse_num(key, value)?,
            "eval_n" => self.eval_n = parse_num(key, value)?,
            "base_domain" => {
                self.base_domain = Domain::from_descriptor(value)
                    .ok_or_else(|| Error::Config(format!("key `base_domain`: unknown domain `{value}`")))?
            }
            "base_n" => self.base_n = parse_num(key, value)?,
            "down_channels" => self.down_channels = parse_list(key, value)?,
            "mid_channels" => self.mid_channels = parse_num(key, value)?,
            "latent_channels" => self.latent_channels = parse_num(key, value)?,
            "base_resolution" => self.base_resolution = parse_num(key, value)?,
            "t_embed_dim" => self.t_embed_dim = parse_num(key, value)?,
            "cond_dim" => self.cond_dim = parse_num(key, value)?,
            "schedule_t" => self.schedule_t = parse_num(key, value)?,
            "beta_start" => self.beta_start = parse_num(key, value)?,
            "beta_end" => self.beta_end = parse_num(key, value)?,
            "vae_epochs" => self.vae_epochs = parse_num(key, value)?,
            "base_unet_epochs" => self.base_unet_epochs = parse_num(key, value)?,
            "lma_epochs" => self.lma_epochs = parse_num(key, value)?,
            "lma_latent_dim" => self.lma_latent_dim = parse_num(key, value)?,
            "lma_learning_rate" => self.lma_learning_rate = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "lambda_adv" => self.lambda_adv = parse_num(key, value)?,
            "lambda_morph" => self.lambda_morph = parse_num(key, value)?,
            "hook_pattern" => self.hook_pattern = HookPattern::from_descriptor(value)?,
            "x0_estimate" => {
                self.x0_estimate = X0Estimate::from_descriptor(value)
                    .ok_or_else(|| Error::Config(format!("key `x0_estimate`: unknown mode `{value}`")))?
            }
            "adv_target" => {
                self.adv_target = AdvTarget::from_descriptor(value)
                    .ok_or_else(|| Error::Config(format!("key `adv_target`: unknown target `{value}`")))?
            }
            "adapter_activation" => {
                self.adapter_activation = match value {
                    "leaky_relu" => AdapterActivation::LeakyRelu,
                    "relu" => AdapterActivation::Relu,
                    other => {
                        return Err(Error::Config(format!(
                            "key `adapter_activation`: unknown activation `{other}`"
                        )))
                    }
                }
            }
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "sample_count" => self.sample_count = parse_num(key, value)?,
            "fid_ref_count" => self.fid_ref_count = parse_num(key, value)?,
            "encoder_fit_count" => self.encoder_fit_count = parse_num(key, value)?,
            "encoder_epochs" => self.encoder_epochs = parse_num(key, value)?,
            "sample_seed" => self.sample_seed = parse_num(key, value)?,
            "base_ckpt" => self.base_ckpt = PathBuf::from(value),
            "lma_ckpt" => self.lma_ckpt = PathBuf::from(value),
            "encoder_ckpt" => self.encoder_ckpt = PathBuf::from(value),
            "adapter_ckpt" => self.adapter_ckpt = Some(PathBuf::from(value)),
            "datasize_list" => self.datasize_list = parse_list(key, value)?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if ![64, 128, 256].contains(&self.data_resolution) {
            return Err(Error::Config(format!(
                "key `data_resolution`: must be 64, 128 or 256, got {}",
                self.data_resolution
            )));
        }
        if self.base_resolution * 4 != self.data_resolution {
            return Err(Error::Config(format!(
                "key `base_resolution`: latent {} x4 must equal data_resolution {}",
                self.base_resolution, self.data_resolution
            )));
        }
        self.unet_spec().validate()?;
        self.train_config().validate()?;
        if self.eval_n < self.encoder_fit_count + self.fid_ref_count {
            return Err(Error::Config(format!(
                "key `eval_n`: need at least encoder_fit_count + fid_ref_count = {}",
                self.encoder_fit_count + self.fid_ref_count
            )));
        }
        if self.data_n == 0 || self.base_n == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            down_channels: self.down_channels.clone(),
            mid_channels: self.mid_channels,
            latent_channels: self.latent_channels,
            base_resolution: self.base_resolution,
            t_embed_dim: self.t_embed_dim,
            cond_dim: self.cond_dim,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            loss_weights: LossWeights {
                lambda_adv: self.lambda_adv,
                lambda_morph: self.lambda_morph,
            },
            schedule_t: self.schedule_t,
            x0_estimate: self.x0_estimate,
            adv_target: self.adv_target,
            adapter_activation: self.adapter_activation,
            grad_clip: self.grad_clip,
        }
    }

    /// Resolves a configured path relative to the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Canonical flat form, used for provenance in manifests and sidecars.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("arm_name".into(), self.arm_name.clone());
        m.insert("out_dir".into(), self.out_dir.display().to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("data_domain".into(), self.data_domain.descriptor().into());
        m.insert("data_n".into(), self.data_n.to_string());
        m.insert("data_resolution".into(), self.data_resolution.to_string());
        m.insert("data_seed".into(), self.data_seed.to_string());
        m.insert("eval_n".into(), self.eval_n.to_string());
        m.insert("base_domain".into(), self.base_domain.descriptor().into());
        m.insert("base_n".into(), self.base_n.to_string());
        m.insert(
            "down_channels".into(),
            self.down_channels
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert("mid_channels".into(), self.mid_channels.to_string());
        m.insert("latent_channels".into(), self.latent_channels.to_string());
        m.insert("base_resolution".into(), self.base_resolution.to_string());
        m.insert("t_embed_dim".into(), self.t_embed_dim.to_string());
        m.insert("cond_dim".into(), self.cond_dim.to_string());
        m.insert("schedule_t".into(), self.schedule_t.to_string());
        m.insert("beta_start".into(), format!("{:?}", self.beta_start));
        m.insert("beta_end".into(), format!("{:?}", self.beta_end));
        m.insert("vae_epochs".into(), self.vae_epochs.to_string());
        m.insert("base_unet_epochs".into(), self.base_unet_epochs.to_string());
        m.insert("lma_epochs".into(), self.lma_epochs.to_string());
        m.insert("lma_latent_dim".into(), self.lma_latent_dim.to_string());
        m.insert(
            "lma_learning_rate".into(),
            format!("{:?}", self.lma_learning_rate),
        );
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("learning_rate".into(), format!("{:?}", self.learning_rate));
        m.insert("lambda_adv".into(), format!("{:?}", self.lambda_adv));
        m.insert("lambda_morph".into(), format!("{:?}", self.lambda_morph));
        m.insert("hook_pattern".into(), self.hook_pattern.descriptor());
        m.insert("x0_estimate".into(), self.x0_estimate.descriptor().into());
        m.insert("adv_target".into(), self.adv_target.descriptor().into());
        m.insert(
            "adapter_activation".into(),
            self.adapter_activation.descriptor().into(),
        );
        m.insert("grad_clip".into(), format!("{:?}", self.grad_clip));
        m.insert("sample_count".into(), self.sample_count.to_string());
        m.insert("fid_ref_count".into(), self.fid_ref_count.to_string());
        m.insert(
            "encoder_fit_count".into(),
            self.encoder_fit_count.to_string(),
        );
        m.insert("encoder_epochs".into(), self.encoder_epochs.to_string());
        m.insert("sample_seed".into(), self.sample_seed.to_string());
        m.insert("base_ckpt".into(), self.base_ckpt.display().to_string());
        m.insert("lma_ckpt".into(), self.lma_ckpt.display().to_string());
        m.insert(
            "encoder_ckpt".into(),
            self.encoder_ckpt.display().to_string(),
        );
        if let Some(p) = &self.adapter_ckpt {
            m.insert("adapter_ckpt".into(), p.display().to_string());
        }
        m.insert(
            "datasize_list".into(),
            self.datasize_list
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        m
    }

    /// Serializes back to the flat text format.
    pub fn to_text(&self) -> String {
        self.to_map()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let back = ExperimentConfig::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ExperimentConfig::from_str(
            "# full line comment\n\nseed = 42   # trailing comment\narm_name = demo\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.arm_name, "demo");
    }

    #[test]
    fn unknown_key_is_a_hard_error_naming_the_key() {
        match ExperimentConfig::from_str("no_such_key = 1\n") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "no_such_key"),
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn bad_resolution_error_names_the_key() {
        let err = ExperimentConfig::from_str("data_resolution = 100\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("data_resolution"), "{msg}");
    }

    #[test]
    fn pattern_and_mode_values_parse() {
        let cfg = ExperimentConfig::from_str(
            "hook_pattern = skip_two\nx0_estimate = variance_preserving\nadv_target = half\n",
        )
        .unwrap();
        assert_eq!(cfg.hook_pattern, HookPattern::SkipTwo);
        assert_eq!(cfg.x0_estimate, X0Estimate::VariancePreserving);
        assert_eq!(cfg.adv_target, AdvTarget::Half);
    }
}
