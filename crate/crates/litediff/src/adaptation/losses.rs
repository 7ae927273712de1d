use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Weights of the composite generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_morph: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 0.1,
            lambda_morph: 0.001,
        }
    }
}

/// Target the generator drives the discriminator output toward. `One` is the
/// standard non-saturating form; `Half` pushes toward maximal confusion
/// instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvTarget {
    One,
    Half,
}

impl AdvTarget {
    pub fn value(self) -> f64 {
        match self {
            AdvTarget::One => 1.0,
            AdvTarget::Half => 0.5,
        }
    }

    pub fn descriptor(self) -> &'static str {
        match self {
            AdvTarget::One => "one",
            AdvTarget::Half => "half",
        }
    }

    pub fn from_descriptor(s: &str) -> Option<Self> {
        match s {
            "one" => Some(AdvTarget::One),
            "half" => Some(AdvTarget::Half),
            _ => None,
        }
    }
}

/// Discriminator objective: `0.5 * (BCE(p_real, 1) + BCE(p_gen, 0))`.
/// The half scales the whole bracket, so a maximally confused discriminator
/// (both probabilities 0.5) scores ln 2.
pub fn discriminator_loss(tape: &mut Tape, p_real: Var, p_gen: Var) -> Result<Var> {
    let real_term = tape.bce(p_real, 1.0)?;
    let gen_term = tape.bce(p_gen, 0.0)?;
    let sum = tape.add(real_term, gen_term)?;
    tape.mul_scalar(sum, 0.5)
}

/// Generator-side adversarial term: `BCE(p_gen, target)`.
pub fn adversarial_loss(tape: &mut Tape, p_gen: Var, target: AdvTarget) -> Result<Var> {
    tape.bce(p_gen, target.value())
}

/// Mean squared difference between the two morphology embeddings.
pub fn morph_loss(tape: &mut Tape, z_real: Var, z_gen: Var) -> Result<Var> {
    tape.mse(z_real, z_gen)
}

/// `recon + lambda_adv * adv + lambda_morph * morph`, summed left to right so
/// the recorded breakdown re-derives the total exactly.
pub fn total_gen_loss(
    tape: &mut Tape,
    recon: Var,
    adv: Var,
    morph: Var,
    w: &LossWeights,
) -> Result<Var> {
    let adv_term = tape.mul_scalar(adv, w.lambda_adv)?;
    let morph_term = tape.mul_scalar(morph, w.lambda_morph)?;
    let partial = tape.add(recon, adv_term)?;
    tape.add(partial, morph_term)
}
