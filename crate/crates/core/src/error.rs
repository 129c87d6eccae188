//! Crate-wide error type.

use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Tensor/layer shape disagreement.
    #[error("shape error: {0}")]
    Shape(String),

    /// Value outside its documented domain (e.g. LDR outside [0,1]).
    #[error("range error: {0}")]
    Range(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A scene directory does not follow the expected dataset layout.
    #[error("malformed scene {dir}: {reason}")]
    MalformedScene { dir: PathBuf, reason: String },

    /// Broken file contents (bad magic, truncated stream, ...).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at scale {scale} (step {step})")]
    NonFinite { scale: usize, step: u64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
