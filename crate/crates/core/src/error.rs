use reform_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid garment params: {0}")]
    InvalidParams(String),

    #[error("no garment detected")]
    NoGarment,

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid latent code: {0}")]
    InvalidCode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("mode collapse suspected: discriminator loss below {threshold} for {steps} consecutive steps")]
    ModeCollapse { threshold: f64, steps: usize },

    #[error("optimization diverged: {0}")]
    NonFinite(String),

    #[error("degenerate pair: ground-truth DCG equals original DCG")]
    DegeneratePair,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
