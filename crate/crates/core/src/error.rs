use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or vector shapes disagree.
    #[error("dimension error in {context}: {detail}")]
    Dimension { context: String, detail: String },

    /// An argument is outside its accepted domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A binary or text file does not follow its format.
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    /// Input records break a cross-record rule (e.g. split leakage).
    #[error("validation error: {0}")]
    Validation(String),

    /// A parse failure tied to a line of a text input.
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },

    /// Non-finite values showed up during training.
    #[error("numerical error at batch {batch} (lr {lr}): {detail}")]
    Numerical { batch: usize, lr: f64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension { context: context.into(), detail: detail.into() }
    }

    pub(crate) fn param(detail: impl Into<String>) -> Self {
        Error::Parameter(detail.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { field: field.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
