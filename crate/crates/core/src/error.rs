use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the inspection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of its allowed range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data failed validation (bad value, missing field, malformed record).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A scorer backend failed; `at` names the invocation (cell, run index, case).
    #[error("scorer failed at {at}: {message}")]
    Scorer { at: String, message: String },

    #[error("case {0} not found")]
    NotFound(String),

    /// The requested state transition is not allowed from the case's current state.
    #[error("conflict: {0}")]
    Conflict(String),

    /// The event log is inconsistent (out-of-order sequence, illegal transition).
    #[error("event log integrity: {0}")]
    Integrity(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
