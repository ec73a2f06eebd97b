//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree with the model or with each other.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input failed a contract check before any compute ran.
    #[error("validation: {0}")]
    Validation(String),

    /// A quantity left its mathematical domain (non-finite loss,
    /// nonpositive ratio argument, zero-accuracy denominator, ...).
    #[error("numeric domain: {0}")]
    Numeric(String),

    /// Weight scoring produced a non-finite gradient.
    #[error("scoring failed in layer `{layer}`: {detail}")]
    Scoring { layer: String, detail: String },

    /// A state invariant the caller relies on was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A lock run aborted mid-flight; the diagnostic snapshot names why.
    #[error("lock run aborted: {0}")]
    Aborted(String),

    /// Remote agent (prompt completion) failure after retries.
    #[error("agent: {0}")]
    Agent(String),

    /// Text-to-image generator failure.
    #[error("generator: {0}")]
    Generator(String),

    /// Malformed payload from a remote client; raw payload attached.
    #[error("parse: {detail}; raw payload: {raw}")]
    Parse { detail: String, raw: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
