//! Draft, verify, accept, repeat.
//!
//! Each round drafts at least one token with the early-exit path, asking the
//! controller after every drafted token whether to continue. The target then
//! scores the pending token plus all drafts in one batched pass, the longest
//! prefix agreeing with the target's greedy choices is kept, and the target's
//! own next token is appended. The output therefore equals greedy
//! auto-regressive decoding of the target.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controllers::{Controller, ControllerConfig, DecisionContext};
use crate::error::{Error, Result};
use crate::model::{SpeculativeModel, StepOutput};
use crate::rng::Rng;
use crate::types::{DecodeTrace, DraftRound, StopReason, TokenId, TokenSequence};

pub const DEFAULT_DRAFT_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Output length cap, prompt included.
    pub max_len: usize,
    pub controller: ControllerConfig,
    /// Upper bound on tokens drafted in one round.
    pub draft_cap: usize,
    #[serde(default)]
    pub stop_tokens: Vec<TokenId>,
}

impl EngineConfig {
    pub fn new(max_len: usize, controller: ControllerConfig) -> Self {
        Self {
            max_len,
            controller,
            draft_cap: DEFAULT_DRAFT_CAP,
            stop_tokens: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 || self.draft_cap < 1 {
            return Err(Error::InvalidConfig(format!(
                "max_len ({}) and draft_cap ({}) must be >= 1",
                self.max_len, self.draft_cap
            )));
        }
        self.controller.validate()
    }
}

/// Result of one verification pass.
#[derive(Debug, Clone)]
pub struct Verification {
    pub accepted_drafts: usize,
    pub bonus: TokenId,
    /// Target state at the position that produced `bonus`.
    pub target_hidden: Vec<f32>,
}

/// Score `pending` followed by `drafted` with the target starting at
/// `prefix_pos`, keep the longest agreeing prefix, and leave the cache at
/// `prefix_pos + accepted + 1`.
pub fn verify<M: SpeculativeModel>(
    model: &M,
    cache: &mut M::Cache,
    prefix_pos: usize,
    pending: TokenId,
    drafted: &[TokenId],
) -> Result<Verification> {
    if drafted.is_empty() {
        return Err(Error::NoDraftedTokens);
    }
    model.rollback(cache, prefix_pos)?;
    let mut fed = Vec::with_capacity(drafted.len() + 1);
    fed.push(pending);
    fed.extend_from_slice(drafted);
    let outputs = model.target_step_batch(cache, &fed)?;
    let accepted = drafted
        .iter()
        .zip(&outputs)
        .take_while(|(d, out)| out.argmax() == **d)
        .count();
    let StepOutput { logits, hidden } = &outputs[accepted];
    let bonus = crate::model::argmax(logits);
    model.rollback(cache, prefix_pos + accepted + 1)?;
    Ok(Verification {
        accepted_drafts: accepted,
        bonus,
        target_hidden: hidden.clone(),
    })
}

/// Target state and next greedy token after the full prompt, with the cache
/// left one position short so the last prompt token is re-fed as the first
/// pending token.
pub(crate) fn prefill<M: SpeculativeModel>(
    model: &M,
    cache: &mut M::Cache,
    prompt: &TokenSequence,
) -> Result<Vec<f32>> {
    let outputs = model.target_step_batch(cache, prompt.tokens())?;
    let last = outputs.last().ok_or(Error::EmptyPrompt)?;
    model.rollback(cache, prompt.len() - 1)?;
    Ok(last.hidden.clone())
}

fn check_prompt<M: SpeculativeModel>(model: &M, prompt: &TokenSequence, max_len: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if prompt.vocab_size() != model.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "prompt vocab size {} != model vocab size {}",
            prompt.vocab_size(),
            model.vocab_size()
        )));
    }
    if prompt.len() >= max_len {
        return Err(Error::InvalidConfig(format!(
            "prompt length {} leaves no room under max_len {max_len}",
            prompt.len()
        )));
    }
    Ok(())
}

/// Speculative decoding of `prompt` up to `cfg.max_len` tokens with a
/// caller-owned controller.
pub fn decode_with<M: SpeculativeModel>(
    model: &M,
    prompt: &TokenSequence,
    cfg: &EngineConfig,
    controller: &mut Controller,
    rng: &mut Rng,
) -> Result<DecodeTrace> {
    let started = Instant::now();
    cfg.validate()?;
    check_prompt(model, prompt, cfg.max_len)?;
    let vocab = model.vocab_size();
    let mut trace = DecodeTrace::new(prompt.clone())?
        .with_cap(cfg.max_len)
        .with_stop_tokens(cfg.stop_tokens.clone());

    let mut cache = model.new_cache();
    let mut target_hidden = prefill(model, &mut cache, prompt)?;
    let mut pending = *prompt.tokens().last().ok_or(Error::EmptyPrompt)?;

    while !trace.is_complete() {
        let out_len = trace.output.len();
        let prefix_pos = out_len - 1;
        let mut drafted: Vec<TokenId> = Vec::new();
        let mut draft_time = 0.0;
        let mut sample_time = 0.0;
        let mut feed = pending;
        let stop_reason = loop {
            let t0 = Instant::now();
            let out = model.draft_step(&mut cache, feed)?;
            let token = out.argmax();
            drafted.push(token);
            draft_time += t0.elapsed().as_secs_f64();

            if out_len + drafted.len() + 1 >= cfg.max_len || drafted.len() >= cfg.draft_cap {
                break StopReason::LengthCap;
            }
            let t1 = Instant::now();
            let decision = controller.decide(
                &DecisionContext {
                    drafted_so_far: drafted.len(),
                    target_hidden: &target_hidden,
                    draft_hidden: &out.hidden,
                },
                rng,
            )?;
            sample_time += t1.elapsed().as_secs_f64();
            if !decision.continue_drafting {
                break StopReason::ControllerStop;
            }
            feed = token;
        };

        let t2 = Instant::now();
        let v = verify(model, &mut cache, prefix_pos, pending, &drafted)?;
        let verify_time = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        controller.observe(v.accepted_drafts, drafted.len())?;
        sample_time += t3.elapsed().as_secs_f64();

        let stop_reason = if v.accepted_drafts < drafted.len() {
            StopReason::Rejection
        } else {
            stop_reason
        };
        pending = v.bonus;
        target_hidden = v.target_hidden;
        trace.push_round(DraftRound {
            drafted: TokenSequence::from_tokens(drafted, vocab)?,
            accepted_drafts: v.accepted_drafts,
            bonus: v.bonus,
            stop_reason,
            draft_time,
            verify_time,
            sample_time,
        })?;
    }
    let phases = trace.wall_times.drafting + trace.wall_times.verification + trace.wall_times.sampling;
    trace.wall_times.other = (started.elapsed().as_secs_f64() - phases).max(0.0);
    Ok(trace)
}

/// Speculative decoding with a fresh controller built from `cfg.controller`.
pub fn decode<M: SpeculativeModel>(
    model: &M,
    prompt: &TokenSequence,
    cfg: &EngineConfig,
    predictor: Option<std::sync::Arc<crate::controllers::PredictorWeights>>,
    rng: &mut Rng,
) -> Result<DecodeTrace> {
    let mut controller = Controller::new(&cfg.controller, predictor)?;
    decode_with(model, prompt, cfg, &mut controller, rng)
}

/// Greedy auto-regressive continuation of `prompt` by the target alone,
/// stopping at `max_len` tokens or right after a stop token.
pub fn autoregressive_reference<M: SpeculativeModel>(
    model: &M,
    prompt: &TokenSequence,
    max_len: usize,
    stop_tokens: &[TokenId],
) -> Result<TokenSequence> {
    check_prompt(model, prompt, max_len)?;
    let mut cache = model.new_cache();
    let outputs = model.target_step_batch(&mut cache, prompt.tokens())?;
    let mut next = outputs.last().ok_or(Error::EmptyPrompt)?.argmax();
    let mut out = prompt.clone();
    loop {
        out.push(next)?;
        if out.len() >= max_len || stop_tokens.contains(&next) {
            return Ok(out);
        }
        next = model.target_step(&mut cache, next)?.argmax();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::ControllerKind;
    use crate::model::{SyntheticPair, ThetaSchedule};

    /// Target whose greedy choices are scripted by position; its draft path
    /// returns a different scripted stream.
    struct Scripted {
        target: Vec<u32>,
        draft: Vec<u32>,
    }

    impl SpeculativeModel for Scripted {
        type Cache = usize;

        fn vocab_size(&self) -> usize {
            16
        }
        fn hidden_size(&self) -> usize {
            1
        }
        fn new_cache(&self) -> usize {
            0
        }
        fn position(&self, c: &usize) -> usize {
            *c
        }
        fn draft_step(&self, c: &mut usize, _t: TokenId) -> Result<StepOutput> {
            *c += 1;
            Ok(one_hot(self.draft[*c]))
        }
        fn target_step_batch(&self, c: &mut usize, tokens: &[TokenId]) -> Result<Vec<StepOutput>> {
            Ok(tokens
                .iter()
                .map(|_| {
                    *c += 1;
                    one_hot(self.target[*c])
                })
                .collect())
        }
        fn rollback(&self, c: &mut usize, p: usize) -> Result<()> {
            *c = p;
            Ok(())
        }
    }

    fn one_hot(t: u32) -> StepOutput {
        let mut logits = vec![0.0; 16];
        logits[t as usize] = 1.0;
        StepOutput {
            logits,
            hidden: vec![0.0],
        }
    }

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&x| TokenId::from_raw(x)).collect()
    }

    // Position p's target argmax is target[p]; prefix is 2 tokens, so the
    // first drafted token is judged by target[3] after the pending token.
    fn model() -> Scripted {
        Scripted {
            target: vec![0, 0, 0, 1, 2, 9, 4, 5],
            draft: vec![0; 8],
        }
    }

    #[test]
    fn partial_acceptance() {
        let m = model();
        let mut c = 2usize;
        let v = verify(&m, &mut c, 2, TokenId::from_raw(7), &ids(&[1, 2, 3])).unwrap();
        assert_eq!((v.accepted_drafts, v.bonus.get(), c), (2, 9, 5));
    }

    #[test]
    fn full_acceptance_takes_next_target_token() {
        let m = model();
        let mut c = 2usize;
        let v = verify(&m, &mut c, 2, TokenId::from_raw(7), &ids(&[1, 2])).unwrap();
        assert_eq!((v.accepted_drafts, v.bonus.get(), c), (2, 9, 5));
    }

    #[test]
    fn immediate_rejection_still_progresses() {
        let m = model();
        let mut c = 2usize;
        let v = verify(&m, &mut c, 2, TokenId::from_raw(7), &ids(&[5])).unwrap();
        assert_eq!((v.accepted_drafts, v.bonus.get(), c), (0, 1, 3));
        assert!(verify(&m, &mut c, 2, TokenId::from_raw(7), &[]).is_err());
    }

    fn pair(theta: f64, seed: u64) -> SyntheticPair {
        SyntheticPair::new(ThetaSchedule::Constant(theta), 32, seed).unwrap()
    }

    fn prompt(len: usize) -> TokenSequence {
        TokenSequence::from_ids(&(0..len as u32).collect::<Vec<_>>(), 32).unwrap()
    }

    #[test]
    fn full_agreement_fixed_five() {
        // Prompt 4, cap 16: 12 new tokens. Each round drafts 5, accepts 5
        // and appends the target's next token.
        let m = pair(1.0, 0);
        let cfg = EngineConfig::new(16, ControllerConfig::with_kind(ControllerKind::FixedK(5)));
        let t = decode(&m, &prompt(4), &cfg, None, &mut Rng::new(0)).unwrap();
        let shape: Vec<_> = t.rounds.iter().map(|r| (r.drafted.len(), r.accepted_drafts)).collect();
        assert_eq!(shape, vec![(5, 5), (5, 5)]);
        assert_eq!(t.generated().len(), 12);
    }

    #[test]
    fn length_cap_shortens_the_last_round() {
        let m = pair(1.0, 0);
        let cfg = EngineConfig::new(14, ControllerConfig::with_kind(ControllerKind::FixedK(5)));
        let t = decode(&m, &prompt(4), &cfg, None, &mut Rng::new(0)).unwrap();
        let shape: Vec<_> = t.rounds.iter().map(|r| (r.drafted.len(), r.stop_reason)).collect();
        assert_eq!(
            shape,
            vec![(5, StopReason::ControllerStop), (3, StopReason::LengthCap)]
        );
        assert_eq!(t.output.len(), 14);
    }

    #[test]
    fn full_rejection_emits_one_token_per_round() {
        let m = pair(0.0, 1);
        let cfg = EngineConfig::new(20, ControllerConfig::with_kind(ControllerKind::BetaTs));
        let t = decode(&m, &prompt(5), &cfg, None, &mut Rng::new(2)).unwrap();
        assert_eq!(t.rounds.len(), 15);
        assert!(t.rounds.iter().all(|r| r.accepted_drafts == 0));
    }

    #[test]
    fn matches_reference_on_synthetic_pair() {
        for theta in [0.0, 0.5, 0.9, 1.0] {
            let m = pair(theta, 7);
            let reference = autoregressive_reference(&m, &prompt(3), 60, &[]).unwrap();
            assert_eq!(reference.len(), 60);
            for kind in [ControllerKind::FixedK(1), ControllerKind::FixedK(6), ControllerKind::BetaTs] {
                let cfg = EngineConfig::new(60, ControllerConfig::with_kind(kind));
                let t = decode(&m, &prompt(3), &cfg, None, &mut Rng::new(5)).unwrap();
                assert_eq!(t.output, reference);
                assert_eq!(t.replay().unwrap().output, t.output);
            }
        }
    }

    #[test]
    fn stop_tokens_end_both_decoders() {
        let m = pair(0.7, 3);
        let full = autoregressive_reference(&m, &prompt(2), 80, &[]).unwrap();
        let stop = full.tokens()[10];
        let reference = autoregressive_reference(&m, &prompt(2), 80, &[stop]).unwrap();
        let mut cfg = EngineConfig::new(80, ControllerConfig::with_kind(ControllerKind::FixedK(4)));
        cfg.stop_tokens = vec![stop];
        let t = decode(&m, &prompt(2), &cfg, None, &mut Rng::new(1)).unwrap();
        assert_eq!(t.output, reference);
        assert_eq!(*t.output.tokens().last().unwrap(), stop);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = pair(0.5, 0);
        let cfg = EngineConfig::new(4, ControllerConfig::with_kind(ControllerKind::FixedK(2)));
        assert!(decode(&m, &prompt(4), &cfg, None, &mut Rng::new(0)).is_err());
        let other = TokenSequence::from_ids(&[1], 8).unwrap();
        assert!(decode(&m, &other, &cfg, None, &mut Rng::new(0)).is_err());
        let mut bad = cfg.clone();
        bad.draft_cap = 0;
        assert!(decode(&m, &prompt(2), &bad, None, &mut Rng::new(0)).is_err());
    }
}
