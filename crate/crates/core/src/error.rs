//! Crate-wide error type. Every fallible public operation returns
//! [`Result`]; the variants distinguish caller mistakes (arguments,
//! configuration) from runtime failures (numerics, I/O, malformed files).

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value passed to an operation is outside its documented domain.
    /// The message names the offending field or parameter.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The operation is not defined for the given inputs (e.g. mismatched
    /// action sets when comparing two MDPs).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A numeric failure surfaced mid-computation: non-finite loss or
    /// gradient, zero-norm embedding, probability row off by more than
    /// tolerance.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Internal shape/state mismatch between components that should have
    /// been constructed together (a bug in the caller, not bad user input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file or field failed validation. The message carries
    /// the dotted field path (e.g. `model.k`).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match the expected format
    /// (bad magic, truncated payload, malformed JSON).
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
