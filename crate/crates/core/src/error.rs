use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decoding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a contract (non-finite samples, missing labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor or matrix shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Required electrodes are absent from the montage.
    #[error("montage is missing ROI electrodes: {}", .0.join(", "))]
    Montage(Vec<String>),

    /// On-disk artifact is malformed.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// On-disk artifact has a version this reader does not understand.
    #[error("unsupported format version {found:?} (reader supports {supported:?})")]
    Version { found: String, supported: String },

    /// A recursion overflowed or produced NaN.
    #[error("numeric error at position {position}: {msg}")]
    Numeric { position: usize, msg: String },

    /// The same subject appears on both sides of a split.
    #[error("subject leakage between source and target: {0:?}")]
    Leakage(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Data(_)
                | Error::Shape(_)
                | Error::Montage(_)
                | Error::Format { .. }
                | Error::Version { .. }
                | Error::Leakage(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
