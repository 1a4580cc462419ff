use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("receiver in complete shadow at ({x:.3}, {y:.3}, {z:.3})")]
    Shadow { x: f64, y: f64, z: f64 },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("resource guard: {0}")]
    ResourceGuard(String),

    #[error("missing product: {0}")]
    MissingProduct(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
