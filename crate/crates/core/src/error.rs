use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("object leaves the {height}x{width} canvas at frame {frame}")]
    TrajectoryEscapes {
        frame: usize,
        height: usize,
        width: usize,
    },

    #[error("output directory {0} exists and is not empty (pass overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("dataset load error in {clip}: {reason}")]
    Load { clip: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[cfg(feature = "io")]
    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[cfg(feature = "model")]
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
