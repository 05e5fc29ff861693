use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("{layer}: shape mismatch: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no supervision: {0}")]
    NoSupervision(String),

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: malformed file: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
