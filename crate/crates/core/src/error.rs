//! Error type shared across the toolkit.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed container/checkpoint content; `offset` is the byte position
    /// at which the problem was detected, when known.
    #[error("format error{}: {msg}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format { msg: String, offset: Option<u64> },

    #[error("label {label} at pixel {pixel} exceeds declared class count {num_classes}")]
    LabelRange {
        pixel: usize,
        label: u16,
        num_classes: u16,
    },

    #[error("non-finite value in {context}{}", index.map(|i| format!(" (index {i})")).unwrap_or_default())]
    NonFinite {
        context: String,
        index: Option<usize>,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("contrastive batch has fewer than two groups (no negatives available)")]
    SingleGroup,

    #[error("contrastive batch is empty")]
    EmptyBatch,

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("non-finite {what} at iteration {iteration}; training aborted")]
    NumericAbort { iteration: usize, what: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Format {
            msg: msg.into(),
            offset,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
