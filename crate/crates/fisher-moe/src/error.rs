//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by geometry, estimation, training, and experiment code.
#[derive(Debug, Error)]
pub enum Error {
    /// Two vectors that must agree in length do not.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A value violated a documented domain requirement.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A probability vector failed validation.
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    /// The loss or a weight became non-finite during training.
    #[error("non-finite loss at step {step}: task={task_loss} aux={aux_loss}")]
    NonFiniteLoss {
        step: usize,
        task_loss: f64,
        aux_loss: f64,
    },

    /// Fisher mass vanished, so the heterogeneity matrix is undefined.
    #[error("degenerate Fisher mass: trace of the mixture-weighted Fisher information is zero")]
    DegenerateFisherMass,

    /// A campaign produced only one outcome class, so ranking metrics are undefined.
    #[error("degenerate campaign: {0}")]
    DegenerateCampaign(String),

    /// Configuration file problems (parse errors carry line/column context).
    #[error("config error: {0}")]
    Config(String),

    /// Output directory is already owned by another process.
    #[error("output directory is locked: {0}")]
    OutputLocked(String),

    /// Filesystem failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
