use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid contraction descriptor `{spec}`: {reason}")]
    Descriptor { spec: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty reduction: {0}")]
    EmptyReduction(String),

    #[error("id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("mismatched batch sizes across layers: {0}")]
    MixedBatchSizes(String),

    #[error("division by zero: {0}")]
    ZeroDenominator(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed log: {0}")]
    Log(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
