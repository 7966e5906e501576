use std::path::PathBuf;

/// Errors produced anywhere in the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called outside its precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Policy parameters and feature map disagree on shape.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    /// Corpus generation could not sample distinct entity chains.
    #[error("entity pool exhausted: need {needed} distinct entities, have {available}")]
    EntityPoolExhausted { needed: usize, available: usize },
    /// Instance lookup failed (e.g. absent from the warm-start store).
    #[error("instance {0} not found")]
    UnknownInstance(u32),
    /// Malformed file content.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
