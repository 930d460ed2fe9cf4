use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("label {value} out of range for {classes} classes at {position:?}")]
    LabelOutOfRange {
        value: u16,
        classes: usize,
        position: Vec<usize>,
    },

    #[error("parameter '{0}' has no gradient")]
    MissingGradient(String),

    #[error("invalid hierarchy: {0}")]
    Hierarchy(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("architecture mode mismatch: expected {expected}, found {found}")]
    ModeMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("hierarchy hash mismatch: {left:016x} vs {right:016x}")]
    HashMismatch { left: u64, right: u64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch in record {index}")]
    Checksum { index: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
