use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes shared by every subcommand.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] epsakit_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid defaults file: {0}")]
    Defaults(String),
    #[error("malformed .t4 data: {0}")]
    Format(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("serialization: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("{0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 3 for numerical failures (divergence, failed gradient checks), 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Core(epsakit_core::Error::Diverged { .. }) => exit::NUMERICAL,
            _ => exit::USAGE,
        }
    }
}
