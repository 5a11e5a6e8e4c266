use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};

/// Shape and seed of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 8,
            d_model: 128,
            d_head: 16,
            vocab_size: 512,
            max_seq_len: 256,
            grid_rows: 8,
            grid_cols: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GiftError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.heads * self.d_head {
            return Err(GiftError::Config(format!(
                "d_model ({}) must equal heads ({}) * d_head ({})",
                self.d_model, self.heads, self.d_head
            )));
        }
        if self.grid_cells() >= self.max_seq_len {
            return Err(GiftError::Config(format!(
                "visual grid of {} cells does not fit max_seq_len {}",
                self.grid_cells(),
                self.max_seq_len
            )));
        }
        Ok(())
    }
}
