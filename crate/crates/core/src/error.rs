use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("training aborted at {context}: {source}")]
    Aborted {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifacts: {0}")]
    Missing(String),

    #[error("malformed file {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure classes for checkpoint files. Each maps to its own error code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad format (magic header not found)")]
    BadFormat,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("truncated file")]
    Truncated,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl CheckpointError {
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadFormat => 1,
            CheckpointError::VersionMismatch { .. } => 2,
            CheckpointError::Truncated => 3,
            CheckpointError::ShapeMismatch(_) => 4,
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error class: 2 configuration, 3 numerical
    /// abort, 4 missing artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Aborted { .. } => 3,
            Error::Missing(_) => 4,
            Error::Checkpoint { .. } => 4,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 4,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}
