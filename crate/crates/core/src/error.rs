//! Error type shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by dataset generation, training, attacks and evaluation.
#[derive(Debug, Error)]
pub enum CtaError {
    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),

    /// A required artifact (checkpoint, dataset, log) is not on disk.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Shape or value contract violated by an input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Training failed to reach a quality gate or diverged.
    #[error("training failure: {0}")]
    Training(String),

    /// Non-finite numbers encountered where finite values are required.
    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CtaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CtaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI contract: 2 config, 3 missing artifact,
    /// 4 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CtaError::Config(_) | CtaError::InvalidInput(_) => 2,
            CtaError::MissingArtifact(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CtaError>;
