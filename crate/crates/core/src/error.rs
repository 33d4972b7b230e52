use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not fit an operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration that cannot produce a valid model or computation.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse (for example a non-scalar loss passed to backward).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid input data, with enough context to locate it.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint that failed validation while loading.
    #[error("checkpoint error in field `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, component: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Checkpoint { field: field.into(), detail: detail.into() }
    }
}
