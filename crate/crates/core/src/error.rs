//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any stage of the benchmark pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset error: {0}")]
    Data(String),

    #[error("undecodable image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("classifier error: {0}")]
    Head(String),

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error("fairness audit error: {0}")]
    Audit(String),

    #[error("configuration error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Single-message configuration error.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, Error>;
