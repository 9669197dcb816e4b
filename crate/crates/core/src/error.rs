use thiserror::Error;

/// Errors surfaced by the tensor, graph, training, metric, and annotation layers.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or axis mismatch between tensors, naming the offending axes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation received a tensor with no spatial extent.
    #[error("empty tensor: {0}")]
    EmptyTensor(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a documented contract (labels, masks, polygons).
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed annotation document.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Metric requested on an empty confusion matrix.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
