use thiserror::Error;

/// Errors shared across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("factorization failed: matrix of size {size} not positive definite (last jitter tried {max_jitter:.3e})")]
    Factorization { size: usize, max_jitter: f64 },

    #[error("likelihood arity mismatch: {0}")]
    Arity(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("mean function does not support the requested operation: {0}")]
    UnsupportedMean(String),

    #[error("latent posterior table has no row for datapoint {0}")]
    MissingLatentRow(usize),

    #[error("objective estimate non-finite for {0} consecutive steps")]
    Divergence(usize),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
