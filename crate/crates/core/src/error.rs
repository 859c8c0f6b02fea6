use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (z_cam = {z_cam})")]
    BehindCamera { z_cam: f64 },

    #[error("invalid depth {0}: must be strictly positive")]
    InvalidDepth(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid calibration: {0}")]
    Calibration(String),

    #[error("numerical failure in term `{term}`")]
    Numerical { term: &'static str },

    #[error("solver failed to converge: {reason}")]
    Convergence { reason: String, trace: Vec<f64> },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
