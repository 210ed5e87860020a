use std::path::PathBuf;

use objsdf_autodiff::TapeError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: expected {expected}, got {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite output of {network} at layer {layer}")]
    NonFiniteLayer { network: &'static str, layer: usize },

    #[error("non-finite value while rendering ray {ray}")]
    NonFiniteRay { ray: usize },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("object id {id} out of range for {num_objects} objects")]
    ObjectOutOfRange { id: usize, num_objects: usize },

    #[error("label {label} out of range for {num_objects} classes")]
    LabelOutOfRange { label: usize, num_objects: usize },

    #[error("dataset error in {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error(transparent)]
    Tape(#[from] TapeError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
