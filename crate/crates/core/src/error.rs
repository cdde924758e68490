use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the inpainting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("dataset ingestion failed for id `{id}`: {reason}")]
    Ingestion { id: String, reason: String },

    #[error("mask generation failed after {attempts} rejected samples (target ratio {lo}..={hi})")]
    Generation { attempts: usize, lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
