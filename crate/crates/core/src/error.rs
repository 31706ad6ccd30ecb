//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Object could not be placed inside the scene.
    #[error("placement error: {0}")]
    Placement(String),

    /// Argument outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Array shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// On-disk format violation (bad header, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Report body does not satisfy its kind's schema.
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("refusing non-finite values: {0}")]
    NonFinite(String),

    /// Input has no usable signal (all-zero heights, constant map, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// Result is mathematically undefined for this input.
    #[error("undefined result: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
