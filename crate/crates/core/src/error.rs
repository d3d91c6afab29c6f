use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: invalid geometry: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("{op}: ground truth must be binary, found {value} at index {index}")]
    NonBinaryTarget {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("backward already ran on this tape; re-run the forward pass first")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("image/mask extent mismatch: {image} is {image_dims:?}, {mask} is {mask_dims:?}")]
    ExtentMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_dims: (usize, usize),
        mask_dims: (usize, usize),
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint parameter `{name}` does not match the model: {detail}")]
    ParameterMismatch { name: String, detail: String },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn geometry(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Geometry {
            op,
            detail: detail.into(),
        }
    }
}
