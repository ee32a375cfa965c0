//! Miniature decoder-only transformer with an early-exit draft head.
//!
//! Architecture: learned token and position embeddings, pre-norm blocks with
//! RMS-norm, multi-head causal attention and a SiLU feed-forward layer, a
//! final RMS-norm and an untied output head. The draft path reuses the
//! hidden state after the first `exit_after` target layers, runs it through
//! `exit_depth` exit layers, the exit RMS-norm and the exit head.
//!
//! A [`NanoCache`] keeps separate key/value histories for the shared layers,
//! the target tail and the exit block. The shared layers also store their
//! output hidden state per position, so each path only runs its own layers
//! and the shared prefix is computed once per position.

mod config;
mod kernels;
mod weights;

pub use config::NanoConfig;
pub use weights::{LayerWeights, NanoWeights, ParamGroup};

use std::sync::atomic::{AtomicU64, Ordering};

use kernels::{linear, rmsnorm, run_layers, LayerKv};

use crate::error::{Error, Result};
use crate::model::{SpeculativeModel, StepOutput};
use crate::types::TokenId;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// Immutable weights plus configuration; shareable across sessions.
#[derive(Debug)]
pub struct NanoModel {
    config: NanoConfig,
    weights: NanoWeights,
    id: u64,
}

impl Clone for NanoModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            weights: self.weights.clone(),
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

/// Positions processed by each layer stack of one session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecCounts {
    pub shared: u64,
    pub tail: u64,
    pub exit: u64,
}

#[derive(Debug, Clone)]
struct StackKv {
    layers: Vec<LayerKv>,
    len: usize,
}

impl StackKv {
    fn new(n: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); n],
            len: 0,
        }
    }

    fn truncate(&mut self, len: usize, d: usize) {
        if len < self.len {
            for l in &mut self.layers {
                l.k.truncate(len * d);
                l.v.truncate(len * d);
            }
            self.len = len;
        }
    }
}

/// Per-session decode state.
///
/// Shared-layer entries past the current position survive a rollback and
/// are reused when the same tokens are fed again at the same positions,
/// which is what lets verification reuse the drafting pass.
#[derive(Debug, Clone)]
pub struct NanoCache {
    model_id: u64,
    position: usize,
    tokens: Vec<TokenId>,
    shared: StackKv,
    shared_hidden: Vec<f32>,
    tail: StackKv,
    exit: StackKv,
    counts: ExecCounts,
}

impl NanoCache {
    pub fn exec_counts(&self) -> ExecCounts {
        self.counts
    }
}

impl NanoModel {
    pub fn new(config: NanoConfig, weights: NanoWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self {
            config,
            weights,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn config(&self) -> &NanoConfig {
        &self.config
    }

    pub fn weights(&self) -> &NanoWeights {
        &self.weights
    }

    pub fn into_parts(self) -> (NanoConfig, NanoWeights) {
        (self.config, self.weights)
    }

    fn check_cache(&self, cache: &NanoCache) -> Result<()> {
        if cache.model_id != self.id {
            return Err(Error::CacheMismatch(format!(
                "cache belongs to model #{}, not #{}",
                cache.model_id, self.id
            )));
        }
        Ok(())
    }

    /// Append `tokens` to the history, computing shared layers for new
    /// positions. Returns the first absolute position fed.
    fn feed(&self, cache: &mut NanoCache, tokens: &[TokenId]) -> Result<usize> {
        self.check_cache(cache)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        if let Some(bad) = tokens.iter().find(|t| t.index() >= cfg.vocab_size) {
            return Err(Error::InvalidToken {
                token: bad.get(),
                vocab_size: cfg.vocab_size,
            });
        }
        let start = cache.position;
        if start + tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceOverflow {
                position: start + tokens.len(),
                max_seq_len: cfg.max_seq_len,
            });
        }
        for &tok in tokens {
            let pos = cache.position;
            if cache.tokens.get(pos) != Some(&tok) {
                cache.tokens.truncate(pos);
                cache.shared.truncate(pos, d);
                cache.shared_hidden.truncate(pos * d);
                cache.tail.truncate(pos, d);
                cache.exit.truncate(pos, d);
                cache.tokens.push(tok);
            }
            cache.position += 1;
        }
        let from = cache.shared.len;
        let to = cache.tokens.len();
        if to > from {
            let w = &self.weights;
            let mut x = vec![0.0f32; (to - from) * d];
            for (r, pos) in (from..to).enumerate() {
                let te = w.tok_emb.row(cache.tokens[pos].index());
                let pe = w.pos_emb.row(pos);
                for ((xi, &a), &b) in x[r * d..(r + 1) * d].iter_mut().zip(te).zip(pe) {
                    *xi = a + b;
                }
            }
            run_layers(
                &w.layers[..cfg.exit_after],
                &mut cache.shared.layers,
                from,
                &mut x,
                cfg.n_heads,
                cfg.norm_eps,
            );
            cache.shared_hidden.extend_from_slice(&x);
            cache.shared.len = to;
            cache.counts.shared += (to - from) as u64;
        }
        Ok(start)
    }

    /// Run one branch (tail or exit) up to the current position, returning
    /// outputs for positions `>= first_output`.
    fn run_branch(
        &self,
        cache: &mut NanoCache,
        exit: bool,
        first_output: usize,
    ) -> Vec<StepOutput> {
        let cfg = &self.config;
        let w = &self.weights;
        let d = cfg.d_model;
        let end = cache.position;
        let (stack, layers, norm, head) = if exit {
            (&mut cache.exit, &w.exit_layers[..], &w.exit_norm, &w.exit_head)
        } else {
            (
                &mut cache.tail,
                &w.layers[cfg.exit_after..],
                &w.final_norm,
                &w.head,
            )
        };
        stack.truncate(first_output, d);
        let from = stack.len;
        let mut x = cache.shared_hidden[from * d..end * d].to_vec();
        run_layers(layers, &mut stack.layers, from, &mut x, cfg.n_heads, cfg.norm_eps);
        stack.len = end;
        if exit {
            cache.counts.exit += (end - from) as u64;
        } else {
            cache.counts.tail += (end - from) as u64;
        }
        let skip = first_output - from;
        let mut outputs = Vec::with_capacity(end - first_output);
        let mut logits = Vec::new();
        for row in x.chunks_exact(d).skip(skip) {
            let mut hidden = vec![0.0f32; d];
            rmsnorm(row, norm.data(), cfg.norm_eps, &mut hidden);
            linear(&hidden, head, &mut logits);
            outputs.push(StepOutput {
                logits: logits.clone(),
                hidden,
            });
        }
        outputs
    }
}

impl SpeculativeModel for NanoModel {
    type Cache = NanoCache;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn hidden_size(&self) -> usize {
        self.config.d_model
    }

    fn new_cache(&self) -> NanoCache {
        let cfg = &self.config;
        NanoCache {
            model_id: self.id,
            position: 0,
            tokens: Vec::new(),
            shared: StackKv::new(cfg.exit_after),
            shared_hidden: Vec::new(),
            tail: StackKv::new(cfg.n_layers - cfg.exit_after),
            exit: StackKv::new(cfg.exit_depth),
            counts: ExecCounts::default(),
        }
    }

    fn position(&self, cache: &NanoCache) -> usize {
        cache.position
    }

    fn draft_step(&self, cache: &mut NanoCache, token: TokenId) -> Result<StepOutput> {
        let pos = self.feed(cache, std::slice::from_ref(&token))?;
        let mut out = self.run_branch(cache, true, pos);
        Ok(out.pop().expect("one draft output"))
    }

    fn target_step_batch(
        &self,
        cache: &mut NanoCache,
        tokens: &[TokenId],
    ) -> Result<Vec<StepOutput>> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("empty target batch".into()));
        }
        let pos = self.feed(cache, tokens)?;
        Ok(self.run_branch(cache, false, pos))
    }

    fn rollback(&self, cache: &mut NanoCache, position: usize) -> Result<()> {
        self.check_cache(cache)?;
        if position > cache.position {
            return Err(Error::RollbackBeyond {
                requested: position,
                position: cache.position,
            });
        }
        let d = self.config.d_model;
        cache.position = position;
        cache.tail.truncate(position, d);
        cache.exit.truncate(position, d);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax;
    use crate::rng::Rng;

    fn model(seed: u64) -> NanoModel {
        let cfg = NanoConfig::tiny();
        let w = NanoWeights::random(&cfg, &mut Rng::new(seed)).unwrap();
        NanoModel::new(cfg, w).unwrap()
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId::from_raw(i)).collect()
    }

    #[test]
    fn target_output_shapes() {
        let m = model(1);
        let mut c = m.new_cache();
        let out = m.target_step(&mut c, TokenId::from_raw(65)).unwrap();
        assert_eq!(out.logits.len(), 256);
        assert_eq!(out.hidden.len(), 32);
        assert!(out.logits.iter().all(|v| v.is_finite()));
        let p = softmax(&out.logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(m.position(&c), 1);
    }

    #[test]
    fn draft_output_shapes() {
        let m = model(1);
        let mut c = m.new_cache();
        let out = m.draft_step(&mut c, TokenId::from_raw(65)).unwrap();
        assert_eq!(out.logits.len(), 256);
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_across_fresh_caches() {
        let m = model(2);
        let seq = toks(&[1, 2, 3, 4, 5]);
        let mut a = m.new_cache();
        let mut b = m.new_cache();
        assert_eq!(
            m.target_step_batch(&mut a, &seq).unwrap(),
            m.target_step_batch(&mut b, &seq).unwrap()
        );
    }

    #[test]
    fn batch_equals_sequential() {
        let m = model(3);
        let seq = toks(&[10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160]);
        let mut a = m.new_cache();
        let batch = m.target_step_batch(&mut a, &seq).unwrap();
        let mut b = m.new_cache();
        let sequential: Vec<_> = seq.iter().map(|&t| m.target_step(&mut b, t).unwrap()).collect();
        assert_eq!(batch.len(), 16);
        assert_eq!(batch, sequential);
        let mut c = m.new_cache();
        assert_eq!(m.target_step_batch(&mut c, &seq[..1]).unwrap()[0], sequential[0]);
    }

    #[test]
    fn causal_prefix_unchanged_by_suffix() {
        let m = model(4);
        let mut a = m.new_cache();
        let short = m.target_step_batch(&mut a, &toks(&[5, 6, 7])).unwrap();
        let mut b = m.new_cache();
        let long = m.target_step_batch(&mut b, &toks(&[5, 6, 7, 8, 9])).unwrap();
        assert_eq!(&long[..3], short.as_slice());
        let mut c = m.new_cache();
        let perturbed = m.target_step_batch(&mut c, &toks(&[5, 6, 7, 200, 201])).unwrap();
        assert_eq!(&perturbed[..3], short.as_slice());
    }

    #[test]
    fn rollback_matches_fresh_cache() {
        let m = model(5);
        let mut c = m.new_cache();
        m.target_step_batch(&mut c, &toks(&[1, 2, 3])).unwrap();
        m.rollback(&mut c, 1).unwrap();
        let after = m.target_step(&mut c, TokenId::from_raw(9)).unwrap();
        let mut fresh = m.new_cache();
        let expected = m.target_step_batch(&mut fresh, &toks(&[1, 9])).unwrap();
        assert_eq!(after, expected[1]);
    }

    #[test]
    fn rollback_bounds() {
        let m = model(5);
        let mut c = m.new_cache();
        m.target_step_batch(&mut c, &toks(&[1, 2])).unwrap();
        m.rollback(&mut c, 2).unwrap();
        assert_eq!(m.position(&c), 2);
        assert!(matches!(
            m.rollback(&mut c, 3),
            Err(Error::RollbackBeyond { requested: 3, position: 2 })
        ));
    }

    #[test]
    fn overflow_and_bad_token() {
        let m = model(6);
        let mut c = m.new_cache();
        let long = vec![TokenId::from_raw(1); 257];
        assert!(matches!(
            m.target_step_batch(&mut c, &long),
            Err(Error::SequenceOverflow { .. })
        ));
        assert!(matches!(
            m.target_step(&mut c, TokenId::from_raw(256)),
            Err(Error::InvalidToken { .. })
        ));
        assert_eq!(m.position(&c), 0);
    }

    #[test]
    fn foreign_cache_rejected() {
        let a = model(7);
        let b = model(7);
        let mut c = a.new_cache();
        assert!(matches!(
            b.target_step(&mut c, TokenId::from_raw(1)),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn identity_construction_draft_equals_target() {
        let mut cfg = NanoConfig::tiny();
        cfg.exit_after = cfg.n_layers - 1;
        let mut w = NanoWeights::random(&cfg, &mut Rng::new(8)).unwrap();
        w.init_exit_from_target(&cfg).unwrap();
        let m = NanoModel::new(cfg, w).unwrap();
        let seq = toks(&[3, 1, 4, 1, 5, 9, 2, 6]);
        let mut dc = m.new_cache();
        let mut tc = m.new_cache();
        for &t in &seq {
            let d = m.draft_step(&mut dc, t).unwrap();
            let g = m.target_step(&mut tc, t).unwrap();
            assert_eq!(d, g);
        }
    }

    #[test]
    fn shared_prefix_reused_by_target() {
        let m = model(9);
        let seq = toks(&[11, 12, 13, 14]);
        let mut c = m.new_cache();
        for &t in &seq {
            m.draft_step(&mut c, t).unwrap();
        }
        m.rollback(&mut c, 0).unwrap();
        let verified = m.target_step_batch(&mut c, &seq).unwrap();
        let counts = c.exec_counts();
        assert_eq!(counts.shared, 4);
        assert_eq!(counts.exit, 4);
        assert_eq!(counts.tail, 4);
        let mut fresh = m.new_cache();
        assert_eq!(verified, m.target_step_batch(&mut fresh, &seq).unwrap());
    }
}
