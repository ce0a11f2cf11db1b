//! Statistical NLU models: a maximum-entropy intent classifier and a
//! linear-chain CRF slot tagger, both trained by seeded stochastic
//! subgradient descent with elastic-net regularization, plus 8-bit
//! quantization for deployment.

mod crf;
mod frame;
mod maxent;
mod quantize;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crf::{crf_loglik_grad, train_crf, CrfGradient, CrfModel, TaggedSequence};
pub use frame::{bio_labels, decode_frame, OUTSIDE};
pub use maxent::{train_maxent, train_maxent_named, MaxEntModel};
pub use quantize::{quantize_row, QuantizedColumns, QuantizedCrf, QuantizedMaxEnt, QuantizedRow};
pub use weights::Columns;

use crate::features::FeatureError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label {0:?} has no training examples")]
    LabelWithoutExamples(String),
    #[error("label {0:?} is not in the label table")]
    UnknownLabel(String),
    #[error("feature vector has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("illegal BIO sequence at position {position}: {label} cannot follow {previous}")]
    IllegalSequence { position: usize, previous: String, label: String },
    #[error("sequence is empty")]
    EmptySequence,
    #[error("{features} feature positions but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model format error: {0}")]
    Format(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and regularization settings shared by both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate; decays as `eta0 / (1 + t / decay_steps)`.
    pub eta0: f64,
    /// Steps for the rate to halve; 0 means one epoch.
    pub decay_steps: usize,
    pub l1: f64,
    pub l2: f64,
    pub dropout: f64,
    pub hash_bits: u32,
    pub hash_seed: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            eta0: 0.5,
            decay_steps: 0,
            l1: 1e-6,
            l2: 1e-6,
            dropout: crate::features::DEFAULT_DROPOUT,
            hash_bits: crate::features::DEFAULT_HASH_BITS,
            hash_seed: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
            return bad("regularization strengths must be >= 0");
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("eta0 must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(1..=30).contains(&self.hash_bits) {
            return bad("hash_bits must be in 1..=30");
        }
        Ok(())
    }
}

/// Full-batch regularized objective after each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub objective: Vec<f64>,
}
