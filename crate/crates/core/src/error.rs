use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RslmError {
    #[error("dimension mismatch: expected {expected} values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("invalid mass function: {0}")]
    InvalidMass(String),

    #[error("invalid belief vector: {0}")]
    InvalidBelief(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("context overflow: {len} tokens exceed context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty generation trace")]
    EmptyTrace,

    #[error("dataset has {0} records; at least 2 are needed for a derangement")]
    DatasetTooSmall(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RslmError>;

impl RslmError {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::DimensionMismatch { .. } => "dimension_mismatch",
            Self::TokenOutOfRange { .. } => "token_out_of_range",
            Self::UnknownToken(_) => "unknown_token",
            Self::InvalidVocabulary(_) => "invalid_vocabulary",
            Self::InvalidBudget(_) => "invalid_budget",
            Self::InvalidMass(_) => "invalid_mass",
            Self::InvalidBelief(_) => "invalid_belief",
            Self::InvalidDistribution(_) => "invalid_distribution",
            Self::Format { .. } => "format",
            Self::InvalidArgument(_) => "invalid_argument",
            Self::ContextOverflow { .. } => "context_overflow",
            Self::NonFiniteLoss { .. } => "non_finite_loss",
            Self::Checkpoint(_) => "checkpoint",
            Self::EmptyTrace => "empty_trace",
            Self::DatasetTooSmall(_) => "dataset_too_small",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }
}
