use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at batch {batch} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(&'static str),

    #[error("checkpoint contains unknown tensor `{0}`")]
    CheckpointUnknown(String),

    #[error("checkpoint is missing tensor `{0}`")]
    CheckpointMissing(String),

    #[error("checkpoint is malformed: {0}")]
    CheckpointMalformed(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("io error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
