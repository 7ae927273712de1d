//! Desk-scale evaluation: a bespoke frozen feature encoder, Fréchet-distance
//! scoring, a perceptual-distance proxy, and report assembly.
//!
//! Absolute metric values are specific to the fitted encoder and are not
//! comparable to any published numbers; only orderings across arms scored by
//! the identical encoder instance carry meaning.

mod encoder;
mod fid;
mod report;
mod stats;

pub use encoder::{fit_eval_encoder, EncoderFitConfig, EvalEncoder, FeatureStack, FEATURE_DIM};
pub use fid::{fid_desk, paired, perceptual_proxy, MIN_SET_SIZE};
pub use report::{ArmMetrics, MetricsReport, REPORT_CSV_HEADER};
pub use stats::{fit_gaussian, frechet_distance, GaussianStats, COV_RIDGE};
