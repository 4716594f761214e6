use thiserror::Error;

use crate::diffusion::DiffusionModel;
use crate::predictor::PredictorParams;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("step index {t} outside 1..={t_max}")]
    StepIndex { t: usize, t_max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("predictor training diverged at step {step}")]
    PredictorDiverged {
        step: usize,
        checkpoint: Box<PredictorParams>,
    },

    #[error("diffusion training diverged at step {step}")]
    DiffusionDiverged {
        step: usize,
        checkpoint: Box<DiffusionModel>,
    },

    #[error("ingestion failed: {0}")]
    Ingestion(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad input or configuration rather than a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Argument(_) | Error::Format(_) | Error::Shape(_)
        )
    }
}
