use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::rope::DEFAULT_BASE;

/// Shape of the decoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub rotary_base: f64,
    /// Output head shares the token embedding matrix.
    pub tie_head: bool,
    /// Informational; the longest sequence the model is expected to see.
    pub max_eval_positions: usize,
}

impl Default for ModelConfig {
    /// The smoke configuration: byte vocabulary plus one reserved id.
    fn default() -> Self {
        Self {
            vocab_size: 257,
            model_dim: 32,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 4,
            rotary_base: DEFAULT_BASE,
            tie_head: true,
            max_eval_positions: 1024,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads.max(1)
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.vocab_size == 0 || self.model_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return bad("all counts must be at least 1");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1");
        }
        if self.model_dim % self.num_heads != 0 {
            return bad("model_dim must be divisible by num_heads");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head_dim must be even");
        }
        if !(self.rotary_base.is_finite() && self.rotary_base > 1.0) {
            return bad("rotary_base must be greater than 1");
        }
        Ok(())
    }
}
