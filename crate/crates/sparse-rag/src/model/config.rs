//! Model hyperparameters and reserved token ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_position: u32,
    pub pad_id: u32,
    pub eos_id: u32,
    pub control_assessment_id: u32,
    pub control_generation_id: u32,
    pub rate_good_id: u32,
    pub rate_bad_id: u32,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn reserved_ids(&self) -> [u32; 6] {
        [
            self.pad_id,
            self.eos_id,
            self.control_assessment_id,
            self.control_generation_id,
            self.rate_good_id,
            self.rate_bad_id,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.num_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(
                "vocab_size, dim, num_layers, and ffn_dim must be positive".into(),
            ));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotation pairing",
                self.head_dim()
            )));
        }
        if self.max_position == 0 {
            return Err(Error::Config("max_position must be positive".into()));
        }
        let ids = self.reserved_ids();
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "reserved id {a} out of range for vocab size {}",
                    self.vocab_size
                )));
            }
            if ids[..i].contains(a) {
                return Err(Error::Config(format!("reserved ids must be distinct, {a} repeats")));
            }
        }
        Ok(())
    }
}
