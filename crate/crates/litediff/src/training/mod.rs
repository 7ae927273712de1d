//! The two training phases (morphology-model pretraining and the adapter +
//! discriminator loop), checkpointing, and the freeze-contract audit.

mod artifacts;
mod audit;
mod checkpoint;
mod config;
mod phase_a;
mod phase_b;

pub use artifacts::{
    into_hooked, load_adapters_into, load_base, load_lma, resume_train_state, save_adapters,
    save_base, save_lma, save_train_state,
};
pub use audit::FreezeAudit;
pub use checkpoint::{CheckpointFile, CheckpointWriter, Manifest, TensorRecord, FORMAT_VERSION, MAGIC};
pub use config::{LossBreakdown, TrainConfig, X0Estimate, LOSS_CSV_HEADER};
pub use phase_a::{phase_a_train, PhaseAConfig};
pub use phase_b::{phase_b_step, phase_b_train, PhaseBState};

#[cfg(test)]
mod tests;
