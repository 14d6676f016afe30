use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every trainable input")]
    DetachedLoss,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step} (lambda={lambda}, lr={lr}): {what}")]
    Diverged {
        step: usize,
        lambda: f64,
        lr: f64,
        what: String,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("path error: {path}: {reason}")]
    Path { path: PathBuf, reason: String },

    #[error("image decode failed for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short stable identifier used by the CLI for machine-greppable errors.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonScalarLoss(_) | Error::DetachedLoss => "autodiff",
            Error::NonFinite(_) => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::Corrupt { .. } => "corrupt",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Path { .. } => "path",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}
