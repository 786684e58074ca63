//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any affkit module.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected contract) disagree on shape.
    #[error("shape mismatch: {left:?} vs {right:?} in {context}")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A manifest row failed validation.
    #[error("manifest {path}: line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// An image could not be decoded or encoded.
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    /// A checkpoint file is malformed.
    #[error("checkpoint {path}: {msg} (at byte offset {offset})")]
    Checkpoint {
        path: PathBuf,
        msg: String,
        offset: u64,
    },

    /// A training step produced a non-finite loss.
    #[error("non-finite {task} loss in batch {batch}: {value}")]
    NonFiniteLoss {
        task: &'static str,
        batch: usize,
        value: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the environment (filesystem, decoding) rather
    /// than of the inputs; the CLI maps these to a distinct exit status.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Image { .. } | Error::Checkpoint { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
