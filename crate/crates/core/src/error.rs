use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report. The CLI maps each kind to a stable
/// exit code and a one-word prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Numeric(String),

    #[error("{0}")]
    State(String),

    #[error("{0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    #[error("{0}")]
    Schema(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used as the prefix of CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::Integrity(_) => "integrity",
            Error::UnsupportedVersion { .. } => "version",
            Error::Schema(_) => "schema",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }

    /// Process exit status: 2 for configuration and I/O problems, 3 for
    /// numeric failures, 4 for damaged or incompatible checkpoints.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::Image { .. } => 2,
            Error::Numeric(_) => 3,
            Error::State(_)
            | Error::Integrity(_)
            | Error::UnsupportedVersion { .. }
            | Error::Schema(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
