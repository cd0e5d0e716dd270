use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the tracking, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or sizes do not line up with what an operation expects.
    #[error("input error: {0}")]
    Input(String),

    /// A configuration value is invalid or inconsistent with another one.
    #[error("configuration error: {0}")]
    Config(String),

    /// The latent encoder was asked to summarize an empty sample set.
    #[error("encoder input error: {0}")]
    EncoderInput(String),

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset ingestion failed.
    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    /// Tracker initialization could not proceed.
    #[error("initialization error: {0}")]
    Init(String),

    /// Diagnostic reports need data that was not recorded.
    #[error("report error: {0}")]
    Report(String),

    /// Checkpoint could not be read or does not match this build.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
