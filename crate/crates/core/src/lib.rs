//! Sequence-to-sequence sleep staging with a shared attentional epoch
//! encoder, and transfer of a pretrained network to a new recording
//! channel by finetuning chosen parts of it.
//!
//! The pipeline runs `dataio` (recordings, synthetic cohorts) →
//! `spectrogram` (log-power images) → `network` (model and gradients) →
//! `training` / `transfer` → `evaluation` (fused inference, metrics, LOSO).

pub mod config;
pub mod dataio;
pub mod evaluation;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod spectrogram;
pub mod training;
pub mod transfer;

use thiserror::Error;

/// Any failure, tagged by the stage it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data error: {0}")]
    Data(#[from] dataio::DataError),
    #[error("spectrogram error: {0}")]
    Spectrogram(#[from] spectrogram::SpectrogramError),
    #[error("network error: {0}")]
    Network(#[from] network::NetworkError),
    #[error("training error: {0}")]
    Training(#[from] training::TrainingError),
    #[error("evaluation error: {0}")]
    Evaluation(#[from] evaluation::EvalError),
    #[error("config error: {0}")]
    Config(#[from] config::ConfigError),
    #[error("io error: {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category name, also used to pick the process exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Data(_) => "data",
            Error::Spectrogram(_) => "spectrogram",
            Error::Network(_) => "network",
            Error::Training(_) => "training",
            Error::Evaluation(_) => "evaluation",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
