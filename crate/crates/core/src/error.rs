//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: configuration
//! problems (2), data/ingest problems (3), and numeric failures (4). Shape and
//! contract violations inside the tensor graph are programming errors and
//! panic instead.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Language <-> visual alignment failed (missing track, unknown name, ...).
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Alignment(_)
            | Error::Checkpoint(_)
            | Error::InsufficientData(_)
            | Error::Io { .. }
            | Error::Json { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
