use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RdmError>;

#[derive(Debug, Error)]
pub enum RdmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("filter `{filter}` is not finite at sigma = {sigma:e}")]
    FilterDomain { filter: String, sigma: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RdmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RdmError::InvalidInput(msg.into())
    }
}
