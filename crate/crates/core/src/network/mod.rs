//! The sequence-to-sequence staging network: a learnable filterbank, an
//! attentional epoch-level bi-GRU (ARNN) shared across epochs, a
//! sequence-level bi-GRU (SeqRNN) and a softmax classifier.

pub mod checkpoint;
mod graph;
mod ops;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use graph::{Dropout, Mode};
pub use ops::{
    arnn_forward, attention_pool, attention_weights, classify, epoch_features, ernn_encode, filterbank_apply,
    gru_step, predict_from_features, predict_sequences, seqrnn_forward, sequence_loss, LossOutput,
    SequenceRef,
};
pub use params::{
    canonical_index, triangular_filterbank, AttentionParams, FilterbankParams, GruCellParams,
    ModelParams, Projection, CANONICAL_NAMES, N_TENSORS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::N_CLASSES;
use crate::numerics::NumericsError;
use crate::spectrogram::N_FREQ;

pub const N_OUT: usize = N_CLASSES;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("empty or ragged batch")]
    EmptyBatch,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture and regularization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Frequency bins of the input image (F).
    pub n_freq: usize,
    /// Filterbank size (M < F).
    pub n_filters: usize,
    /// Epoch-level GRU units per direction.
    pub ernn_hidden: usize,
    /// Width of the attention projection and context vector.
    pub attention_size: usize,
    /// Sequence-level GRU units per direction.
    pub seqrnn_hidden: usize,
    /// Epochs per input sequence (L).
    pub seq_len: usize,
    pub dropout: f64,
    /// L2 weight (λ) of the loss regularizer.
    pub l2: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n_freq: N_FREQ,
            n_filters: 32,
            ernn_hidden: 64,
            attention_size: 64,
            seqrnn_hidden: 64,
            seq_len: 20,
            dropout: 0.25,
            l2: 1e-3,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidHyperParams(m));
        if self.n_filters == 0 || self.n_filters >= self.n_freq {
            return bad(format!("need 0 < M < F, got M={} F={}", self.n_filters, self.n_freq));
        }
        if self.ernn_hidden == 0 || self.seqrnn_hidden == 0 || self.attention_size == 0 {
            return bad("hidden and attention sizes must be positive".into());
        }
        if self.seq_len == 0 {
            return bad("sequence length must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("negative L2 weight {}", self.l2));
        }
        Ok(())
    }

    /// Width of the epoch feature `x` (and of each `a_t`).
    pub fn feature_width(&self) -> usize {
        2 * self.ernn_hidden
    }

    /// Width of each SeqRNN output `o_i`.
    pub fn seq_output_width(&self) -> usize {
        2 * self.seqrnn_hidden
    }
}
