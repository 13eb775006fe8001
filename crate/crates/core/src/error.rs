use thiserror::Error;

use crate::datagen::DataError;
use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Whether the error stems from invalid user input or configuration rather than an
    /// internal failure. A missing input file counts as invalid input; other I/O
    /// failures and numeric faults do not.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Diff(_) => false,
            Error::Io { source, .. } | Error::Data(DataError::Io { source, .. }) => {
                source.kind() == std::io::ErrorKind::NotFound
            }
            _ => true,
        }
    }

    /// Short category used in machine-readable messages.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Diff(_) => "numeric",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    /// Narrows to a [`DiffError`] so crate objectives can be handed to the gradient checker.
    pub fn into_diff(self) -> DiffError {
        match self {
            Error::Diff(d) => d,
            other => DiffError::Domain {
                op: "objective",
                detail: other.to_string(),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
