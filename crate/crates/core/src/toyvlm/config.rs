// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::datagen::{Vocab, PATCH_DIM};
use crate::error::{Error, Result};

/// Architecture of the toy vision-language transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of each MLP block.
    pub d_ff: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Standard deviation of the initial weights. Attention and MLP output
    /// projections are further divided by `sqrt(2 * layers)`.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: PATCH_DIM,
            vocab_size: Vocab::standard().len(),
            max_text_len: 16,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn n_visual(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("model config: {m}")));
        if self.layers < 2 {
            return bad(format!("layers = {} (need >= 2)", self.layers));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.patch_dim == 0 || self.vocab_size == 0 || self.max_text_len == 0 {
            return bad("zero-sized dimension".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("empty patch grid".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std = {}", self.init_std));
        }
        Ok(())
    }
}
