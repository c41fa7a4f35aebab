use thiserror::Error;

/// Errors raised anywhere in the defense toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("unknown feature layer `{0}`")]
    Layer(String),
    #[error("patch out of bounds: {0}")]
    Bounds(String),
    #[error("loss diverged at step {step}: {value}")]
    Divergence { step: usize, value: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
