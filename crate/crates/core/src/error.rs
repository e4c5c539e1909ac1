// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised by the numerics, model, editing and benchmark layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or matrix shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN/Inf input or a value outside the mathematical domain of a kernel.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// An index (token id, layer, position) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input is degenerate for the requested analysis (zero variance, all-zero logits).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A word outside the closed vocabulary.
    #[error("unknown word `{0}`")]
    UnknownWord(String),

    /// Malformed checkpoint, dataset or report file.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
