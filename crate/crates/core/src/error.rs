//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model error: {0}")]
    Model(String),

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("filter error: {0}")]
    Filter(String),

    #[error("particle weight collapse at step {step}")]
    WeightCollapse { step: usize },

    #[error("training diverged for {context}: {detail}")]
    TrainingDiverged { context: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
