use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("unknown language: {0}")]
    UnknownLanguage(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short tag used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::UnknownId(_) => "unknown_id",
            Error::UnknownLanguage(_) => "unknown_language",
            Error::Empty(_) => "empty",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
