//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("pauli label {0} out of range (expected 0..=3)")]
    PauliLabelOutOfRange(u8),

    #[error("negative decay rate gamma[{index}] = {value}")]
    NegativeGamma { index: usize, value: f64 },

    #[error("integration failure at t = {t}: {reason}")]
    IntegrationFailure { t: f64, reason: String },

    #[error("internal consistency: residual imaginary part {value:.3e} exceeds {limit:.1e} ({context})")]
    ResidualImaginary { value: f64, limit: f64, context: String },

    #[error("unsupported activation '{0}' (supported: tanh)")]
    UnsupportedActivation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("MAPE undefined: every reference entry is zero")]
    UndefinedMetric,

    #[error("all {0} restarts diverged")]
    AllRestartsFailed(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {reason}")]
    Ingest { path: String, line: usize, reason: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
