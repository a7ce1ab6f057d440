use std::path::PathBuf;

use compseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("cannot encode metadata: {0}")]
    Encoding(String),
    #[error("cannot decode head outputs: {0}")]
    Decoding(String),
    #[error("metadata entity `{0}` is missing; run ensemble inference over its categories instead")]
    MissingMetadata(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("checkpoint schema fingerprint {found} does not match dataset schema {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
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
