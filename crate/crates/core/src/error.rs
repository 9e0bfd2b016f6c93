use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{model} fit failed after {iterations} iterations (residual norm {residual:.6e})")]
    FitFailed {
        model: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("frame geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("cross-section band {start}..{end} is empty or outside 0..{height}")]
    BadBand {
        start: usize,
        end: usize,
        height: usize,
    },

    #[error("{0}")]
    Input(String),

    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
