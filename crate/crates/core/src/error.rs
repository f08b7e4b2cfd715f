use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum TideError {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checksum mismatch for record {id} ({file})")]
    Checksum { id: String, file: String },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("missing file {0}")]
    Missing(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TideError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TideError::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        TideError::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TideError::Io { path: path.into(), source }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        TideError::Format { what: what.into(), detail: detail.into() }
    }

    /// True for errors caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            TideError::Io { .. } | TideError::Missing(_) | TideError::Checksum { .. } | TideError::Format { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TideError>;
