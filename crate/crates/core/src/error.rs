use std::path::{Path, PathBuf};

/// Library-wide error type.
///
/// Diagnostics are expected to be actionable: loaders name the offending
/// file (and voxel index where relevant), configuration errors name the
/// rejected combination, numeric failures name where they were detected.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or inconsistent input data (files, caches, checkpoints).
    #[error("invalid data: {0}")]
    Invalid(String),

    /// Rejected configuration (unsupported parameter combination).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Numeric failure during computation (non-finite loss, degenerate input).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
