use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown singer id {id}; known ids: {known:?}")]
    UnknownSinger { id: u32, known: Vec<u32> },

    #[error("module is untrained: {0}")]
    Untrained(String),

    #[error("unsupported wav format: {0}")]
    Wav(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable, machine-parseable category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) | Error::Shape { .. } => "invalid_input",
            Error::UnknownSinger { .. } => "unknown_singer",
            Error::Untrained(_) => "untrained",
            Error::Wav(_) => "wav",
            Error::Config(_) => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Corpus(_) => "corpus",
            Error::Io { .. } => "io",
        }
    }
}
