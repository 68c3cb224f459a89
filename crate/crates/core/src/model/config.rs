use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the masked-token encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::max_seq")]
    pub max_seq: usize,
    pub mask_token_id: usize,
    pub pad_token_id: usize,
}

mod defaults {
    pub fn d_model() -> usize {
        64
    }
    pub fn n_layers() -> usize {
        4
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn max_seq() -> usize {
        64
    }
}

impl ModelConfig {
    /// Default widths for the given vocabulary and special ids.
    pub fn new(vocab_size: usize, mask_token_id: usize, pad_token_id: usize) -> Self {
        Self {
            vocab_size,
            d_model: defaults::d_model(),
            n_layers: defaults::n_layers(),
            n_heads: defaults::n_heads(),
            max_seq: defaults::max_seq(),
            mask_token_id,
            pad_token_id,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mask_token_id >= self.vocab_size || self.pad_token_id >= self.vocab_size {
            return Err(Error::Config("special token ids must be < vocab_size".into()));
        }
        if self.mask_token_id == self.pad_token_id {
            return Err(Error::Config("mask and pad ids must differ".into()));
        }
        Ok(())
    }
}
