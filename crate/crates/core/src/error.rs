//! Error taxonomy shared by every module.
//!
//! Categories map one-to-one onto CLI exit codes: configuration (3),
//! data/cache (4), numerical (5). Usage errors are clap's domain (2).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration values.
    #[error("config: {0}")]
    Config(String),

    /// Malformed input data; carries the offending location.
    #[error("ingest: {path}:{line}: {msg}")]
    Ingest {
        path: String,
        line: usize,
        msg: String,
    },

    /// A (sample, segment) key absent from the vision cache.
    #[error("cache miss: sample {sample_id:?} segment {segment}")]
    CacheMiss { sample_id: String, segment: usize },

    /// An on-disk cache was produced under different render/encoder settings.
    #[error("stale cache: {0}")]
    StaleCache(String),

    /// Non-finite loss, overflowing context, or other numerical failure.
    #[error("numerical: {0}")]
    Numerical(String),

    /// A sequence exceeded the model's context window.
    #[error("context overflow: sequence length {got} exceeds context {limit}")]
    ContextOverflow { got: usize, limit: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI layer.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Ingest { .. }
            | Error::CacheMiss { .. }
            | Error::StaleCache(_)
            | Error::Io(_)
            | Error::Serde(_) => 4,
            Error::Numerical(_) | Error::ContextOverflow { .. } => 5,
        }
    }
}
