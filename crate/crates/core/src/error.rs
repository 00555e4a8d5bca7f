use std::path::PathBuf;

use autodiff::AutodiffError;
use thiserror::Error;

use crate::task::Token;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("sequence of length {len} exceeds the context limit {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("token {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: Token, vocab: usize },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("record {index}: {source}")]
    Record { index: usize, source: Box<Error> },

    #[error("training diverged in stage {stage} at step {step}: {detail}")]
    Diverged {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("output directory {0} already has files; pass --force to overwrite")]
    OutputExists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Autodiff(_) => "autodiff",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::UnknownToken { .. } => "unknown_token",
            Error::MalformedResponse(_) => "malformed_response",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Record { .. } => "record",
            Error::Diverged { .. } => "diverged",
            Error::Empty(_) => "empty",
            Error::Checkpoint(_) => "checkpoint",
            Error::OutputExists(_) => "output_exists",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn in_record(self, index: usize) -> Self {
        Error::Record {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
