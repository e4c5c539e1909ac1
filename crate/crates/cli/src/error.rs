// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    /// Bad key, bad type or bad value in the run configuration.
    #[error("config: {0}")]
    Config(String),

    /// An artifact another command should have produced is missing.
    #[error("missing prerequisite {what}: {path}")]
    Missing { what: String, path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] visedit_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage or config, 2 missing prerequisite, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Missing { .. } => 2,
            Self::Core(visedit_core::Error::NumericDomain(_)) => 3,
            _ => 1,
        }
    }
}
