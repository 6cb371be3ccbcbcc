use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MmgtError>;

#[derive(Debug, Error)]
pub enum MmgtError {
    #[error("keypoint layout violation: {0}")]
    LayoutViolation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("corrupt or truncated data in {path}: {reason}")]
    Integrity { path: String, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MmgtError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MmgtError::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MmgtError::InvalidArgument(msg.into())
    }

    /// Maps a missing-file io error onto `NotFound` so callers can report the path.
    pub(crate) fn io_at(err: std::io::Error, path: &std::path::Path) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            MmgtError::NotFound(path.to_path_buf())
        } else {
            MmgtError::Io(err)
        }
    }
}
