use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("matmul inner dimensions differ: {left:?} . {right:?}")]
    InnerDimMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("channel mismatch: input has {input} channels, operator expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },

    #[error("kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        padded: Vec<usize>,
    },

    #[error("tensor invariant violated: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("optimizer step before backward: parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("adapters already attached")]
    AlreadyAttached,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("frozen parameter mutated: {0}")]
    FrozenMutation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
