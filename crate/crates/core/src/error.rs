//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("unknown token id {id} (vocab size {vocab_size})")]
    UnknownTokenId { id: u32, vocab_size: usize },

    #[error("model error: {0}")]
    Model(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("tokenizer fingerprint mismatch: checkpoint expects {expected}, got {actual}")]
    TokenizerMismatch { expected: String, actual: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("sweep error: {0}")]
    Sweep(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
