use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a nano transformer and of its early-exit draft head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NanoConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Total target layers.
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// The draft path branches off after this many target layers.
    pub exit_after: usize,
    /// Transformer layers in the exit block.
    pub exit_depth: usize,
    pub norm_eps: f32,
}

impl Default for NanoConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_heads: 4,
            n_layers: 8,
            d_ff: 512,
            max_seq_len: 512,
            exit_after: 2,
            exit_depth: 1,
            norm_eps: 1e-5,
        }
    }
}

impl NanoConfig {
    /// Small shape used by tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            n_heads: 2,
            n_layers: 4,
            d_ff: 64,
            max_seq_len: 256,
            exit_after: 1,
            exit_depth: 1,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 2 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return fail(format!("degenerate dimensions in {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.exit_after < 1 || self.exit_after >= self.n_layers {
            return fail(format!(
                "exit_after must satisfy 1 <= N < n_layers ({}), got {}",
                self.n_layers, self.exit_after
            ));
        }
        if self.exit_depth < 1 {
            return fail("exit_depth must be >= 1".into());
        }
        if self.exit_depth > self.n_layers {
            return fail(format!(
                "exit_depth {} exceeds n_layers {}",
                self.exit_depth, self.n_layers
            ));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        Ok(())
    }
}
