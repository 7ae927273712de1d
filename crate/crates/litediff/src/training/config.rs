use std::collections::BTreeMap;

use crate::adaptation::{AdapterActivation, AdvTarget, LossWeights};
use crate::error::{Error, Result};

/// How the denoised latent is estimated before decoding during training.
/// `Paper` is the verbatim `z_t - eps_hat`; `VariancePreserving` rescales to
/// the standard clean-latent estimate `(z_t - sigma_t eps_hat) / alpha_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum X0Estimate {
    Paper,
    VariancePreserving,
}

impl X0Estimate {
    pub fn descriptor(self) -> &'static str {
        match self {
            X0Estimate::Paper => "paper",
            X0Estimate::VariancePreserving => "variance_preserving",
        }
    }

    pub fn from_descriptor(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(X0Estimate::Paper),
            "variance_preserving" => Some(X0Estimate::VariancePreserving),
            _ => None,
        }
    }
}

/// Settings of one adapter-training run; serialized into every checkpoint
/// manifest the run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub schedule_t: usize,
    pub x0_estimate: X0Estimate,
    pub adv_target: AdvTarget,
    pub adapter_activation: AdapterActivation,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            loss_weights: LossWeights::default(),
            schedule_t: 200,
            x0_estimate: X0Estimate::Paper,
            adv_target: AdvTarget::One,
            adapter_activation: AdapterActivation::LeakyRelu,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.schedule_t == 0 {
            return Err(Error::Config(
                "epochs, batch_size and schedule_t must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config(
                "learning_rate and grad_clip must be positive".into(),
            ));
        }
        if self.loss_weights.lambda_adv < 0.0 || self.loss_weights.lambda_morph < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Flat string form embedded in checkpoint manifests.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("learning_rate".into(), format!("{:?}", self.learning_rate));
        m.insert("seed".into(), self.seed.to_string());
        m.insert(
            "lambda_adv".into(),
            format!("{:?}", self.loss_weights.lambda_adv),
        );
        m.insert(
            "lambda_morph".into(),
            format!("{:?}", self.loss_weights.lambda_morph),
        );
        m.insert("schedule_t".into(), self.schedule_t.to_string());
        m.insert("x0_estimate".into(), self.x0_estimate.descriptor().into());
        m.insert("adv_target".into(), self.adv_target.descriptor().into());
        m.insert(
            "adapter_activation".into(),
            self.adapter_activation.descriptor().into(),
        );
        m.insert("grad_clip".into(), format!("{:?}", self.grad_clip));
        m
    }
}

/// Per-step loss record; `gen_total` re-derives from the components and
/// weights at the recorded summation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub epoch: usize,
    pub recon: f64,
    pub adv: f64,
    pub morph: f64,
    pub gen_total: f64,
    pub disc: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,recon,adv,morph,gen_total,disc";

impl LossBreakdown {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.epoch, self.recon, self.adv, self.morph, self.gen_total, self.disc
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn csv_row_roundtrips_through_parse() {
        let lb = LossBreakdown {
            step: 3,
            epoch: 1,
            recon: 0.123456789123456789,
            adv: std::f64::consts::LN_2,
            morph: 1e-9,
            gen_total: 0.2,
            disc: 0.7,
        };
        let row = lb.csv_row();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 7);
        assert_eq!(fields[2].parse::<f64>().unwrap().to_bits(), lb.recon.to_bits());
        assert_eq!(fields[4].parse::<f64>().unwrap().to_bits(), lb.morph.to_bits());
    }
}
