use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VqaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("frame {frame}: {reason}")]
    Frame { frame: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("adjacency row {row} has vanishing denominator ({value:e})")]
    VanishingDenominator { row: usize, value: f64 },

    #[error("manifest {path}, row {row}: {reason}")]
    Manifest {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("id join failed: missing {missing:?}, duplicate {duplicate:?}")]
    Join {
        missing: Vec<String>,
        duplicate: Vec<String>,
    },

    #[error("provider `{name}`: {reason}")]
    Provider { name: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VqaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VqaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        VqaError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub(crate) fn ensure_finite<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    context: impl FnOnce() -> String,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(VqaError::NonFinite { context: context() })
    }
}
