//! The decoding contract shared by the neural bundle and the synthetic
//! oracle pairs.
//!
//! A [`SpeculativeModel`] owns a draft path and a target path over one token
//! history. Both paths consume tokens from the same cache; `position` counts
//! tokens consumed so far, whichever path consumed them.

mod synthetic;

pub use synthetic::{SyntheticCache, SyntheticPair, ThetaSchedule};

use crate::error::Result;
use crate::types::TokenId;

/// Next-token scores and the final hidden state at the emitted position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    pub hidden: Vec<f32>,
}

impl StepOutput {
    pub fn argmax(&self) -> TokenId {
        argmax(&self.logits)
    }
}

/// Greedy choice; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    TokenId::from_raw(best as u32)
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A draft/target model pair decoding over a shared session cache.
pub trait SpeculativeModel: Sync {
    type Cache: Send;

    fn vocab_size(&self) -> usize;

    /// Length of `StepOutput::hidden`.
    fn hidden_size(&self) -> usize;

    fn new_cache(&self) -> Self::Cache;

    /// Number of tokens consumed by `cache`.
    fn position(&self, cache: &Self::Cache) -> usize;

    /// Consume `token` through the draft path.
    fn draft_step(&self, cache: &mut Self::Cache, token: TokenId) -> Result<StepOutput>;

    /// Consume `tokens` through the target path; `outputs[i]` is the target
    /// distribution after `tokens[..=i]`. Identical, bitwise, to calling
    /// [`target_step`](Self::target_step) once per token.
    fn target_step_batch(&self, cache: &mut Self::Cache, tokens: &[TokenId])
        -> Result<Vec<StepOutput>>;

    fn target_step(&self, cache: &mut Self::Cache, token: TokenId) -> Result<StepOutput> {
        let mut out = self.target_step_batch(cache, std::slice::from_ref(&token))?;
        Ok(out.pop().expect("one output per token"))
    }

    /// Restore `cache` to the state after consuming its first `position`
    /// tokens.
    fn rollback(&self, cache: &mut Self::Cache, position: usize) -> Result<()>;
}
