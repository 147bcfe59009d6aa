use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, bounds or channel counts that violate an operation's contract.
    #[error("input contract violated: {0}")]
    InputContract(String),

    #[error("class registry: {0}")]
    Registry(String),

    #[error("annotation budget: requested {requested} pixels of class {class_id}, only {available} available")]
    Budget {
        class_id: u8,
        requested: usize,
        available: usize,
    },

    #[error("duplicate annotation at ({row}, {col})")]
    DuplicateAnnotation { row: usize, col: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("crop sampling: {0}")]
    Sampling(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch between {image} and {mask}: {detail}")]
    ShapeMismatch {
        image: PathBuf,
        mask: PathBuf,
        detail: String,
    },

    #[error("mask {file} contains undeclared class id {class_id}")]
    UndeclaredClass { file: PathBuf, class_id: u8 },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("synthetic dataset specification: {0}")]
    Specification(String),

    #[error("image codec: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Codec(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Codec(e.to_string())
    }
}
