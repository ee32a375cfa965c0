//! Token streams, draft rounds and decode traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(u32);

impl TokenId {
    pub fn new(value: u32, vocab_size: usize) -> Result<Self> {
        if (value as usize) < vocab_size {
            Ok(TokenId(value))
        } else {
            Err(Error::InvalidToken {
                token: value,
                vocab_size,
            })
        }
    }

    /// Construct without a bounds check; callers guarantee `value < vocab_size`.
    pub(crate) fn from_raw(value: u32) -> Self {
        TokenId(value)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Ordered token sequence bound to a vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    vocab_size: usize,
}

impl TokenSequence {
    pub fn empty(vocab_size: usize) -> Self {
        Self {
            tokens: Vec::new(),
            vocab_size,
        }
    }

    pub fn from_ids(ids: &[u32], vocab_size: usize) -> Result<Self> {
        let tokens = ids
            .iter()
            .map(|&v| TokenId::new(v, vocab_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tokens, vocab_size })
    }

    pub fn from_tokens(tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|t| t.index() >= vocab_size) {
            return Err(Error::InvalidToken {
                token: bad.get(),
                vocab_size,
            });
        }
        Ok(Self { tokens, vocab_size })
    }

    /// Byte-level sequence (vocabulary 256).
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            tokens: bytes.iter().map(|&b| TokenId(b as u32)).collect(),
            vocab_size: 256,
        }
    }

    pub fn push(&mut self, token: TokenId) -> Result<()> {
        if token.index() >= self.vocab_size {
            return Err(Error::InvalidToken {
                token: token.get(),
                vocab_size: self.vocab_size,
            });
        }
        self.tokens.push(token);
        Ok(())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.get()).collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Why a drafting round ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    ControllerStop,
    LengthCap,
    Rejection,
}

/// One draft/verify cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftRound {
    pub drafted: TokenSequence,
    pub accepted_drafts: usize,
    pub bonus: TokenId,
    pub stop_reason: StopReason,
    pub draft_time: f64,
    pub verify_time: f64,
    pub sample_time: f64,
}

impl DraftRound {
    pub fn validate(&self) -> Result<()> {
        let n = self.drafted.len();
        if self.accepted_drafts > n {
            return Err(Error::InvalidRound(format!(
                "accepted_drafts {} exceeds drafted {}",
                self.accepted_drafts, n
            )));
        }
        let rejected = self.accepted_drafts < n;
        if rejected != (self.stop_reason == StopReason::Rejection) {
            return Err(Error::InvalidRound(format!(
                "stop_reason {:?} inconsistent with {}/{} accepted",
                self.stop_reason, self.accepted_drafts, n
            )));
        }
        for (name, t) in [
            ("draft_time", self.draft_time),
            ("verify_time", self.verify_time),
            ("sample_time", self.sample_time),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidRound(format!("{name} = {t}")));
            }
        }
        if self.bonus.index() >= self.drafted.vocab_size() {
            return Err(Error::InvalidToken {
                token: self.bonus.get(),
                vocab_size: self.drafted.vocab_size(),
            });
        }
        Ok(())
    }

    /// Tokens this round contributes to the output before any truncation.
    pub fn emitted(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.drafted.tokens()[..self.accepted_drafts]
            .iter()
            .copied()
            .chain(std::iter::once(self.bonus))
    }
}

/// Accumulated wall time per decode phase, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub drafting: f64,
    pub verification: f64,
    pub sampling: f64,
    pub other: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.drafting + self.verification + self.sampling + self.other
    }
}

/// Full log of a decode session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub prompt_len: usize,
    pub rounds: Vec<DraftRound>,
    pub output: TokenSequence,
    pub wall_times: PhaseTimes,
    /// Hard bound on `output.len()`, prompt included.
    #[serde(default)]
    pub max_len: Option<usize>,
    /// Decoding finishes right after the first emitted token in this set.
    #[serde(default)]
    pub stop_tokens: Vec<TokenId>,
    #[serde(default)]
    pub finished: bool,
}

impl DecodeTrace {
    pub fn new(prompt: TokenSequence) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        Ok(Self {
            prompt_len: prompt.len(),
            rounds: Vec::new(),
            output: prompt,
            wall_times: PhaseTimes::default(),
            max_len: None,
            stop_tokens: Vec::new(),
            finished: false,
        })
    }

    pub fn with_cap(mut self, max_len: usize) -> Self {
        self.max_len = Some(max_len);
        self
    }

    pub fn with_stop_tokens(mut self, stop: Vec<TokenId>) -> Self {
        self.stop_tokens = stop;
        self
    }

    /// Tokens produced after the prompt.
    pub fn generated(&self) -> &[TokenId] {
        &self.output.tokens()[self.prompt_len..]
    }

    pub fn is_complete(&self) -> bool {
        self.finished || self.max_len.is_some_and(|cap| self.output.len() >= cap)
    }

    /// Append a round: accepted prefix, then bonus, then apply stop tokens
    /// and the length cap. Per-round times are added to the phase totals.
    pub fn push_round(&mut self, round: DraftRound) -> Result<()> {
        round.validate()?;
        if round.drafted.vocab_size() != self.output.vocab_size() {
            return Err(Error::InvalidRound(format!(
                "vocab size {} != trace vocab size {}",
                round.drafted.vocab_size(),
                self.output.vocab_size()
            )));
        }
        if self.is_complete() {
            return Err(Error::InvalidRound("trace already complete".into()));
        }
        for tok in round.emitted() {
            if self.max_len.is_some_and(|cap| self.output.len() >= cap) {
                break;
            }
            self.output.push(tok)?;
            if self.stop_tokens.contains(&tok) {
                self.finished = true;
                break;
            }
        }
        self.wall_times.drafting += round.draft_time;
        self.wall_times.verification += round.verify_time;
        self.wall_times.sampling += round.sample_time;
        self.rounds.push(round);
        Ok(())
    }

    /// Rebuild the output by replaying the round log from the prompt.
    pub fn replay(&self) -> Result<DecodeTrace> {
        let prompt = TokenSequence::from_tokens(
            self.output.tokens()[..self.prompt_len].to_vec(),
            self.output.vocab_size(),
        )?;
        let mut t = DecodeTrace::new(prompt)?.with_stop_tokens(self.stop_tokens.clone());
        t.max_len = self.max_len;
        for r in &self.rounds {
            t.push_round(r.clone())?;
        }
        t.wall_times.other = self.wall_times.other;
        Ok(t)
    }

    pub fn total_drafted(&self) -> usize {
        self.rounds.iter().map(|r| r.drafted.len()).sum()
    }

    pub fn total_accepted(&self) -> usize {
        self.rounds.iter().map(|r| r.accepted_drafts).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_ids(ids, 16).unwrap()
    }

    fn round(drafted: &[u32], accepted: usize, bonus: u32) -> DraftRound {
        DraftRound {
            drafted: seq(drafted),
            accepted_drafts: accepted,
            bonus: TokenId::new(bonus, 16).unwrap(),
            stop_reason: if accepted < drafted.len() {
                StopReason::Rejection
            } else {
                StopReason::ControllerStop
            },
            draft_time: 0.0,
            verify_time: 0.0,
            sample_time: 0.0,
        }
    }

    #[test]
    fn new_trace_identity() {
        let t = DecodeTrace::new(seq(&[5, 9])).unwrap();
        assert_eq!(t.prompt_len, 2);
        assert!(t.rounds.is_empty());
        assert_eq!(t.output.ids(), vec![5, 9]);
    }

    #[test]
    fn new_trace_rejects_empty_prompt() {
        assert!(matches!(
            DecodeTrace::new(seq(&[])),
            Err(Error::EmptyPrompt)
        ));
    }

    #[test]
    fn new_trace_long_prompt() {
        let ids: Vec<u32> = (0..512).map(|i| i % 16).collect();
        let t = DecodeTrace::new(seq(&ids)).unwrap();
        assert_eq!(t.prompt_len, 512);
    }

    #[test]
    fn push_round_appends_prefix_then_bonus() {
        let mut t = DecodeTrace::new(seq(&[1])).unwrap();
        t.push_round(round(&[2, 3], 2, 4)).unwrap();
        assert_eq!(t.output.ids(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn full_rejection_keeps_only_bonus() {
        let mut t = DecodeTrace::new(seq(&[1])).unwrap();
        t.push_round(round(&[7], 0, 5)).unwrap();
        assert_eq!(t.output.ids(), vec![1, 5]);
    }

    #[test]
    fn cap_truncates_mid_round() {
        let mut t = DecodeTrace::new(seq(&[1, 2])).unwrap().with_cap(3);
        t.push_round(round(&[3, 4], 2, 5)).unwrap();
        assert_eq!(t.output.ids(), vec![1, 2, 3]);
        assert!(t.is_complete());
    }

    #[test]
    fn stop_token_ends_trace() {
        let stop = TokenId::new(3, 16).unwrap();
        let mut t = DecodeTrace::new(seq(&[1])).unwrap().with_stop_tokens(vec![stop]);
        t.push_round(round(&[2, 3, 4], 3, 5)).unwrap();
        assert_eq!(t.output.ids(), vec![1, 2, 3]);
        assert!(t.is_complete());
        assert!(t.push_round(round(&[2], 1, 5)).is_err());
    }

    #[test]
    fn invalid_rounds_rejected() {
        let mut t = DecodeTrace::new(seq(&[1])).unwrap();
        assert!(t.push_round(round(&[2], 2, 4)).is_err());
        let mut r = round(&[2, 3], 1, 4);
        r.stop_reason = StopReason::ControllerStop;
        assert!(t.push_round(r).is_err());
        let mut r = round(&[2, 3], 2, 4);
        r.stop_reason = StopReason::Rejection;
        assert!(t.push_round(r).is_err());
        let mut r = round(&[2], 1, 4);
        r.verify_time = -1.0;
        assert!(t.push_round(r).is_err());
        assert_eq!(t.output.ids(), vec![1]);
    }

    #[test]
    fn token_bounds_checked() {
        assert!(TokenId::new(16, 16).is_err());
        assert!(TokenSequence::from_ids(&[0, 16], 16).is_err());
    }

    fn arb_round() -> impl Strategy<Value = DraftRound> {
        (proptest::collection::vec(0u32..16, 1..8), any::<prop::sample::Index>(), 0u32..16, 0.0f64..1.0)
            .prop_map(|(d, idx, bonus, dt)| {
                let acc = idx.index(d.len() + 1);
                let mut r = round(&d, acc, bonus);
                r.draft_time = dt;
                r.verify_time = dt * 2.0;
                r
            })
    }

    proptest! {
        #[test]
        fn length_identity_and_replay(
            prompt in proptest::collection::vec(0u32..16, 1..10),
            rounds in proptest::collection::vec(arb_round(), 0..12),
        ) {
            let mut t = DecodeTrace::new(seq(&prompt)).unwrap();
            for r in &rounds {
                t.push_round(r.clone()).unwrap();
            }
            let expected: usize = rounds.iter().map(|r| r.accepted_drafts + 1).sum();
            prop_assert_eq!(t.output.len(), prompt.len() + expected);
            let drafting: f64 = rounds.iter().map(|r| r.draft_time).sum();
            prop_assert!((t.wall_times.drafting - drafting).abs() < 1e-12);
            let replayed = t.replay().unwrap();
            prop_assert_eq!(&replayed.output, &t.output);
        }

        #[test]
        fn cap_is_hard_bound(
            prompt in proptest::collection::vec(0u32..16, 1..5),
            extra in 1usize..20,
            rounds in proptest::collection::vec(arb_round(), 1..12),
        ) {
            let cap = prompt.len() + extra;
            let mut t = DecodeTrace::new(seq(&prompt)).unwrap().with_cap(cap);
            for r in rounds {
                if t.is_complete() { break; }
                t.push_round(r).unwrap();
            }
            prop_assert!(t.output.len() <= cap);
            let replayed = t.replay().unwrap();
            prop_assert_eq!(&replayed.output, &t.output);
        }
    }
}
