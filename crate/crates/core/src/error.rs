use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("curvature mismatch: {0} vs {1}")]
    CurvatureMismatch(f64, f64),

    #[error("invalid curvature {0}: must be finite and > 0")]
    InvalidCurvature(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("non-finite value at step {step}: {what} (last good checkpoint: {last_good})")]
    NonFinite { step: u64, what: String, last_good: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line surface: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite { .. } => 3,
            Error::DimensionMismatch { .. }
            | Error::CurvatureMismatch(..)
            | Error::InvalidCurvature(_)
            | Error::Contract(_)
            | Error::UnknownLabel(_)
            | Error::Taxonomy(_)
            | Error::Parse { .. }
            | Error::Dataset(_)
            | Error::Checkpoint { .. }
            | Error::Io { .. } => 2,
        }
    }
}
