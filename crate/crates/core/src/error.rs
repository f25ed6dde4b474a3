//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type. The `exit_code` mapping is part of the CLI
/// contract: 1 usage, 2 data/invariant, 3 numerical failure.
#[derive(Debug, Error)]
pub enum AxError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invariant violation in record '{record_id}': {msg}")]
    InvariantViolation { record_id: String, msg: String },

    #[error("insufficient context: {0}")]
    InsufficientContext(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported checkpoint version {found} (supported ≤ {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, AxError>;

impl AxError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AxError::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            AxError::InvalidArgument(_) | AxError::InvalidConfig(_) => 1,
            AxError::Parse { .. }
            | AxError::InvariantViolation { .. }
            | AxError::InsufficientContext(_)
            | AxError::ConfigMismatch(_)
            | AxError::ShapeMismatch(_)
            | AxError::CheckpointVersion { .. }
            | AxError::Io { .. }
            | AxError::Serde(_) => 2,
            AxError::Divergence { .. } | AxError::Numerical(_) => 3,
        }
    }
}
