use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the erasure library.
///
/// Variants map onto the CLI exit codes: configuration problems exit with 2,
/// everything else with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("text encoder contract violated: {0}")]
    EncoderContract(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("non-finite loss {loss} at step {step} (timestep {timestep})")]
    NonFiniteLoss {
        step: u64,
        timestep: usize,
        loss: f64,
    },

    #[error(
        "reference set incomplete: accepted {accepted} of {requested} after {tried} candidates"
    )]
    PartialReferenceSet {
        accepted: usize,
        requested: usize,
        tried: usize,
        manifest: PathBuf,
    },

    #[error("toy pretraining gate failed: {0}")]
    PretrainGate(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("safetensors error: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Load(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
