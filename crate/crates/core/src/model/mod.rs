//! Miniature decoder-only transformer with rotary attention over explicit
//! per-token effective positions.

mod checkpoint;
mod config;
mod params;
mod train;
mod transformer;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use params::{Layout, TensorSpec, TinyModelParams, EMBED_STD};
pub use train::{
    argmax, continue_training, greedy_decode, train, Adam, LrSchedule, StepMetrics, TrainOptions, TrainState, METRICS_HEADER,
};
pub use transformer::{token_nll, weighted_nll, LossValue};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("positions must be finite and strictly increasing (violated at index {index})")]
    NonIncreasingPositions { index: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss weight {0}")]
    InvalidWeight(f64),
    #[error("non-finite values in {layer}")]
    NumericOverflow { layer: String },
    #[error("loss diverged at step {step}: {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("position stream exhausted: need {needed} positions, have {available}")]
    PositionsExhausted { needed: usize, available: usize },
    #[error("mixed sequence lengths in one batch: {first} and {other}")]
    MixedLengths { first: usize, other: usize },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training sequence inside a [`Batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub tokens: Vec<u32>,
    /// Assigned integer positions; divided by the batch scale before rotation.
    pub positions: Vec<u64>,
    /// `weights[l]` weighs the prediction of `tokens[l + 1]`.
    pub weights: Vec<f64>,
}

/// Equal-length rows sharing one interpolation scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    rows: Vec<BatchRow>,
    scale: f64,
}

impl Batch {
    pub fn new(rows: Vec<BatchRow>, scale: f64) -> Result<Self, ModelError> {
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(ModelError::ShapeMismatch(format!("invalid scale {scale}")));
        }
        let first = rows.first().ok_or(ModelError::EmptySequence)?.tokens.len();
        for row in &rows {
            let n = row.tokens.len();
            if n != first {
                return Err(ModelError::MixedLengths { first, other: n });
            }
            if n < 2 || row.positions.len() != n || row.weights.len() + 1 != n {
                return Err(ModelError::ShapeMismatch(format!(
                    "row with {} tokens, {} positions, {} weights",
                    n,
                    row.positions.len(),
                    row.weights.len()
                )));
            }
            if let Some(i) = row.positions.windows(2).position(|w| w[0] >= w[1]) {
                return Err(ModelError::NonIncreasingPositions { index: i + 1 });
            }
            if let Some(&w) = row.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
                return Err(ModelError::InvalidWeight(w));
            }
        }
        Ok(Self { rows, scale })
    }

    pub fn rows(&self) -> &[BatchRow] {
        &self.rows
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.rows[0].tokens.len()
    }

    pub fn effective_positions(&self, row: &BatchRow) -> Vec<f64> {
        crate::plan::effective_positions(&row.positions, self.scale)
    }
}
