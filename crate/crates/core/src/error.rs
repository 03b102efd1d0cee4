use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("embedding row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing upstream artifact {path}; run `{command}` first")]
    MissingArtifact { path: PathBuf, command: String },

    #[error("missing cache record for anchor {0}")]
    MissingRecord(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::NotNormalized { .. } => "not_normalized",
            Error::Diverged(_) => "diverged",
            Error::Checksum { .. } => "checksum",
            Error::Format { .. } => "format",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::MissingRecord(_) => "missing_record",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

/// Fails with the index of the first non-finite entry.
pub fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
