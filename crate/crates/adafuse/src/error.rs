use std::path::PathBuf;

use adafuse_core::Error as CoreError;

/// Process exit codes of the `adafuse` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const DATA: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const GRADCHECK: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code under the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(CoreError::Config(_)) => exit::CONFIG,
            Error::Core(CoreError::Divergence { .. }) => exit::DIVERGENCE,
            _ => exit::DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
