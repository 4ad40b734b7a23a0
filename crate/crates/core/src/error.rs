use std::path::PathBuf;

use thiserror::Error;

use crate::data::Provenance;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load record '{id}': {reason}")]
    Load { id: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("token {token} out of range for codebook of size {size}")]
    TokenRange { token: usize, size: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("dataset provenance is {got}, expected {expected}")]
    Provenance { expected: String, got: Provenance },

    #[error("training diverged in {stage} at step {step}: loss = {loss}")]
    Diverged {
        stage: String,
        step: usize,
        loss: f64,
    },

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
