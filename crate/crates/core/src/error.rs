use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite values produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("unsupported layer kind `{kind}` at layer `{layer}`")]
    UnsupportedLayer { layer: String, kind: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing argmax record for pooling layer `{0}`")]
    MissingArgmax(String),

    #[error("unknown descriptor id {0}")]
    UnknownDescriptor(u64),

    #[error("box {0} lies outside the image bounds")]
    OutOfBounds(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("pre-trained weights could not be loaded from {path}: {reason}")]
    WeightsUnavailable { path: PathBuf, reason: String },

    #[error("matrix is not positive semi-definite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
