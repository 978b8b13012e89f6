use thiserror::Error;

/// Errors raised by the laboratory's numerical and experimental routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },

    #[error("training diverged at step {step}; last finite step was {last_finite}")]
    Diverged { step: usize, last_finite: usize },

    #[error("indefinite operator detected at iteration {iteration} (p^T A p = {curvature:e})")]
    IndefiniteDetected { iteration: usize, curvature: f64 },

    #[error("dimension {dim} exceeds the dense limit {max}")]
    DimTooLarge { dim: usize, max: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("bad input: {0}")]
    BadInput(String),

    #[error("divergence is identically zero; no log-linear fit is possible")]
    AllZeroDivergence,

    #[error("test point {test_id} is already predicted correctly")]
    AlreadyCorrect { test_id: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(values: &[f64], context: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context() })
    }
}
