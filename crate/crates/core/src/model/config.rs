use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and seed of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 16,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 256,
            max_seq: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::ConfigInvalid(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::ConfigInvalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 8 {
            return Err(ModelError::ConfigInvalid(format!(
                "vocab_size {} is below the minimum of 8",
                self.vocab_size
            )));
        }
        if u32::try_from(self.max_seq.max(self.vocab_size).max(self.d_mlp)).is_err() {
            return Err(ModelError::ConfigInvalid("dimension exceeds u32".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
