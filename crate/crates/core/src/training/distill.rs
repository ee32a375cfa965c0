//! Self-distillation data: continuations written by the trained target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::random_window;
use super::Corpus;
use crate::error::{Error, Result};
use crate::model::{argmax, softmax, SpeculativeModel};
use crate::nano::NanoModel;
use crate::rng::{derive_seed, Rng};
use crate::types::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Tokens generated after each prompt.
    pub continuation_len: usize,
    /// Leading fraction of each continuation decoded greedily; the rest is
    /// sampled.
    pub greedy_fraction: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            continuation_len: 96,
            greedy_fraction: 0.5,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn greedy_len(&self) -> usize {
        (self.greedy_fraction * self.continuation_len as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.continuation_len == 0 || !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(
                "continuation_len and temperature must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.greedy_fraction) {
            return Err(Error::InvalidConfig(format!(
                "greedy_fraction {} outside [0, 1]",
                self.greedy_fraction
            )));
        }
        Ok(())
    }
}

/// `count` prompts of `len` bytes cut at seeded offsets from `docs`
/// (documents shorter than `len` are skipped).
pub fn sample_prompts<'a>(docs: impl IntoIterator<Item = &'a [u8]>, len: usize, count: usize, seed: u64) -> Vec<Vec<u8>> {
    let docs: Vec<&[u8]> = docs.into_iter().filter(|d| d.len() >= len).collect();
    if docs.is_empty() || len == 0 {
        return Vec::new();
    }
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            let doc = docs[rng.below(docs.len() as u64) as usize];
            random_window(doc, len - 1, &mut rng).into_iter().map(|t| t as u8).collect()
        })
        .collect()
}

/// Prompts from the training split of `corpus`.
pub fn distill_prompts(corpus: &Corpus, len: usize, count: usize, seed: u64) -> Vec<Vec<u8>> {
    sample_prompts(corpus.train_docs(), len, count, seed)
}

fn sample(logits: &[f32], temperature: f64, rng: &mut Rng) -> TokenId {
    let scaled: Vec<f32> = logits.iter().map(|&l| (l as f64 / temperature) as f32).collect();
    let probs = softmax(&scaled);
    let mut u = rng.uniform();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return TokenId::from_raw(i as u32);
        }
        u -= p;
    }
    TokenId::from_raw((probs.len() - 1) as u32)
}

fn continue_prompt(model: &NanoModel, prompt: &[u8], cfg: &DistillConfig, seed: u64) -> Result<Vec<u8>> {
    let mut rng = Rng::new(seed);
    let mut cache = model.new_cache();
    let tokens: Vec<TokenId> = prompt.iter().map(|&b| TokenId::from_raw(b as u32)).collect();
    let mut logits = model
        .target_step_batch(&mut cache, &tokens)?
        .pop()
        .ok_or(Error::EmptyPrompt)?
        .logits;
    let greedy = cfg.greedy_len();
    let mut out = Vec::with_capacity(cfg.continuation_len);
    for i in 0..cfg.continuation_len {
        let next = if i < greedy {
            argmax(&logits)
        } else {
            sample(&logits, cfg.temperature, &mut rng)
        };
        out.push(next.get() as u8);
        if i + 1 < cfg.continuation_len {
            logits = model.target_step(&mut cache, next)?.logits;
        }
    }
    Ok(out)
}

/// Continue every prompt with the target: greedy for the first
/// `greedy_fraction` of the continuation, temperature sampling after. Prompt
/// `i` samples from a stream seeded by `derive_seed(cfg.seed, i)`. The
/// returned corpus holds the continuations only, all tagged as generated.
pub fn self_distill_generate(model: &NanoModel, prompts: &[Vec<u8>], cfg: &DistillConfig) -> Result<Corpus> {
    cfg.validate()?;
    let max = model.config().max_seq_len;
    if model.config().vocab_size != 256 {
        return Err(Error::InvalidConfig("self-distillation needs a byte-level model".into()));
    }
    for p in prompts {
        if p.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if p.len() + cfg.continuation_len > max {
            return Err(Error::InvalidConfig(format!(
                "prompt of {} plus {} generated tokens exceeds max_seq_len {max}",
                p.len(),
                cfg.continuation_len
            )));
        }
    }
    let docs = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| continue_prompt(model, p, cfg, derive_seed(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Corpus::generated(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nano::{NanoConfig, NanoWeights};
    use crate::training::{continuation_loss, held_out_loss, train_target, TrainConfig};

    fn trained() -> (NanoModel, Corpus) {
        let corpus = Corpus::bundled(0);
        let cfg = NanoConfig {
            d_model: 32,
            n_layers: 2,
            d_ff: 64,
            max_seq_len: 128,
            exit_after: 1,
            ..NanoConfig::tiny()
        };
        let tc = TrainConfig {
            epochs: 40,
            seq_len: 64,
            ..TrainConfig::default()
        };
        let (w, _) = train_target(&corpus, &cfg, &tc).unwrap();
        (NanoModel::new(cfg, w).unwrap(), corpus)
    }

    #[test]
    fn greedy_half_is_reproducible_and_sampled_half_varies() {
        let (model, corpus) = trained();
        let prompts = distill_prompts(&corpus, 16, 6, 3);
        assert_eq!(prompts.len(), 6);
        assert!(prompts.iter().all(|p| p.len() == 16));
        let cfg = DistillConfig {
            continuation_len: 40,
            ..DistillConfig::default()
        };
        let a = self_distill_generate(&model, &prompts, &cfg).unwrap();
        let b = self_distill_generate(&model, &prompts, &cfg).unwrap();
        let c = self_distill_generate(&model, &prompts, &DistillConfig { seed: 9, ..cfg.clone() }).unwrap();
        assert_eq!(a.documents(), b.documents());
        let g = cfg.greedy_len();
        let mut differs = false;
        for (x, y) in a.documents().iter().zip(c.documents()) {
            assert_eq!(x[..g], y[..g]);
            differs |= x[g..] != y[g..];
        }
        assert!(differs);
        assert!((0..a.documents().len()).all(|i| a.is_generated(i)));
    }

    #[test]
    fn generated_text_is_likely_under_its_generator() {
        let (model, corpus) = trained();
        let prompts = distill_prompts(&corpus, 16, 24, 5);
        let cfg = DistillConfig {
            continuation_len: 96,
            ..DistillConfig::default()
        };
        let gen = self_distill_generate(&model, &prompts, &cfg).unwrap();
        let (mcfg, w): (NanoConfig, NanoWeights) = model.into_parts();
        let gen_loss = continuation_loss(&w, &mcfg, &prompts, gen.documents());
        let held = held_out_loss(&w, &mcfg, &corpus, 64, false);
        assert!(gen_loss <= held, "generated {gen_loss} vs held-out {held}");
    }

    #[test]
    fn rejects_overlong_requests() {
        let (model, _) = trained();
        let cfg = DistillConfig {
            continuation_len: 200,
            ..DistillConfig::default()
        };
        assert!(self_distill_generate(&model, &[b"abc".to_vec()], &cfg).is_err());
        assert!(self_distill_generate(&model, &[Vec::new()], &DistillConfig::default()).is_err());
    }
}
