//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("position id {position} exceeds max_position {max_position}")]
    PositionOverflow { position: u32, max_position: u32 },

    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("cache: {0}")]
    Cache(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("training: {0}")]
    Train(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("labeling: {0}")]
    Labeler(String),

    #[error("backend {backend} failed after {attempts} attempts: {last_error}")]
    BackendExhausted {
        backend: String,
        attempts: u32,
        last_error: String,
    },

    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
