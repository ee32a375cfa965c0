//! Oracle model pairs with a scripted target and a controlled per-position
//! probability that the draft agrees with it.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{SpeculativeModel, StepOutput};
use crate::rng::{hash_words, unit_from_hash};
use crate::types::TokenId;

const HIDDEN: usize = 8;

const STREAM_TARGET: u64 = 0;
const STREAM_AGREE: u64 = 1;
const STREAM_OTHER: u64 = 2;
const STREAM_HIDDEN_DRAFT: u64 = 3;
const STREAM_HIDDEN_TARGET: u64 = 4;

/// Draft/target agreement probability as a function of the absolute index of
/// the token being predicted.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ThetaSchedule {
    Constant(f64),
    /// `(start_index, theta)` segments sorted by start; the first segment
    /// must start at 0.
    Piecewise(Vec<(usize, f64)>),
    Sinusoidal { mean: f64, amplitude: f64, period: f64 },
}

impl From<ThetaSchedule> for String {
    fn from(s: ThetaSchedule) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for ThetaSchedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl ThetaSchedule {
    pub fn theta(&self, index: usize) -> f64 {
        let raw = match self {
            ThetaSchedule::Constant(t) => *t,
            ThetaSchedule::Piecewise(segs) => segs
                .iter()
                .rev()
                .find(|(start, _)| *start <= index)
                .map(|s| s.1)
                .unwrap_or(segs[0].1),
            ThetaSchedule::Sinusoidal {
                mean,
                amplitude,
                period,
            } => mean + amplitude * (std::f64::consts::TAU * index as f64 / period).sin(),
        };
        raw.clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |t: f64| (0.0..=1.0).contains(&t);
        match self {
            ThetaSchedule::Constant(t) if !in_unit(*t) => {
                Err(Error::InvalidSchedule(format!("theta {t} outside [0,1]")))
            }
            ThetaSchedule::Piecewise(segs) => {
                if segs.is_empty() || segs[0].0 != 0 {
                    return Err(Error::InvalidSchedule(
                        "piecewise schedule must start at index 0".into(),
                    ));
                }
                if segs.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::InvalidSchedule(
                        "piecewise starts must be strictly increasing".into(),
                    ));
                }
                match segs.iter().find(|s| !in_unit(s.1)) {
                    Some(s) => Err(Error::InvalidSchedule(format!("theta {} outside [0,1]", s.1))),
                    None => Ok(()),
                }
            }
            ThetaSchedule::Sinusoidal {
                mean,
                amplitude,
                period,
            } => {
                if !(*period > 0.0) {
                    return Err(Error::InvalidSchedule("period must be positive".into()));
                }
                if !in_unit(mean - amplitude.abs()) || !in_unit(mean + amplitude.abs()) {
                    return Err(Error::InvalidSchedule(
                        "sinusoid leaves [0,1]; adjust mean/amplitude".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for ThetaSchedule {
    type Err = Error;

    /// `constant:0.8`, `piecewise:0.9@0,0.3@256`, `sine:0.6,0.3,128`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidSchedule(format!("`{s}`: {why}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("not a number"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected kind:params"))?;
        let sched = match kind.trim() {
            "constant" => ThetaSchedule::Constant(num(rest)?),
            "piecewise" => {
                let mut segs = Vec::new();
                for part in rest.split(',') {
                    let (theta, start) = part
                        .split_once('@')
                        .ok_or_else(|| bad("segments are theta@start"))?;
                    let start = start
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| bad("segment start must be an integer"))?;
                    segs.push((start, num(theta)?));
                }
                ThetaSchedule::Piecewise(segs)
            }
            "sine" => {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 3 {
                    return Err(bad("sine takes mean,amplitude,period"));
                }
                ThetaSchedule::Sinusoidal {
                    mean: num(parts[0])?,
                    amplitude: num(parts[1])?,
                    period: num(parts[2])?,
                }
            }
            _ => return Err(bad("unknown schedule kind")),
        };
        sched.validate()?;
        Ok(sched)
    }
}

impl std::fmt::Display for ThetaSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThetaSchedule::Constant(t) => write!(f, "constant:{t}"),
            ThetaSchedule::Piecewise(segs) => {
                let parts: Vec<String> = segs.iter().map(|(s, t)| format!("{t}@{s}")).collect();
                write!(f, "piecewise:{}", parts.join(","))
            }
            ThetaSchedule::Sinusoidal {
                mean,
                amplitude,
                period,
            } => write!(f, "sine:{mean},{amplitude},{period}"),
        }
    }
}

/// Draft and target models whose outputs depend only on the absolute index
/// of the predicted token.
///
/// The target emits a scripted stream. At index `j` the draft's argmax equals
/// the target's with probability `theta(j)`, drawn independently per index;
/// otherwise it is uniform over the remaining vocabulary.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    schedule: ThetaSchedule,
    vocab_size: usize,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCache {
    key: (u64, usize),
    position: usize,
}

impl SyntheticPair {
    pub fn new(schedule: ThetaSchedule, vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "synthetic pair needs vocab_size >= 2, got {vocab_size}"
            )));
        }
        schedule.validate()?;
        Ok(Self {
            schedule,
            vocab_size,
            seed,
        })
    }

    pub fn schedule(&self) -> &ThetaSchedule {
        &self.schedule
    }

    /// Target token at absolute index `index`.
    pub fn target_token(&self, index: usize) -> TokenId {
        let h = hash_words(&[self.seed, STREAM_TARGET, index as u64]);
        TokenId::from_raw((h % self.vocab_size as u64) as u32)
    }

    /// Draft token at absolute index `index`.
    pub fn draft_token(&self, index: usize) -> TokenId {
        let target = self.target_token(index);
        let u = unit_from_hash(hash_words(&[self.seed, STREAM_AGREE, index as u64]));
        if u < self.schedule.theta(index) {
            return target;
        }
        let other = hash_words(&[self.seed, STREAM_OTHER, index as u64]) % (self.vocab_size as u64 - 1);
        let other = other as u32;
        TokenId::from_raw(if other >= target.get() { other + 1 } else { other })
    }

    fn output(&self, token: TokenId, index: usize, stream: u64) -> StepOutput {
        let mut logits = vec![0.0f32; self.vocab_size];
        logits[token.index()] = 1.0;
        let theta = self.schedule.theta(index);
        let mut hidden = Vec::with_capacity(HIDDEN);
        hidden.push(theta as f32);
        for k in 1..HIDDEN {
            let h = hash_words(&[self.seed, stream, index as u64, k as u64, theta.to_bits()]);
            hidden.push((2.0 * unit_from_hash(h) - 1.0) as f32);
        }
        StepOutput { logits, hidden }
    }

    fn check(&self, cache: &SyntheticCache, token: TokenId) -> Result<()> {
        if cache.key != (self.seed, self.vocab_size) {
            return Err(Error::CacheMismatch(
                "cache was created by a different synthetic pair".into(),
            ));
        }
        if token.index() >= self.vocab_size {
            return Err(Error::InvalidToken {
                token: token.get(),
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }
}

impl SpeculativeModel for SyntheticPair {
    type Cache = SyntheticCache;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn hidden_size(&self) -> usize {
        HIDDEN
    }

    fn new_cache(&self) -> SyntheticCache {
        SyntheticCache {
            key: (self.seed, self.vocab_size),
            position: 0,
        }
    }

    fn position(&self, cache: &SyntheticCache) -> usize {
        cache.position
    }

    fn draft_step(&self, cache: &mut SyntheticCache, token: TokenId) -> Result<StepOutput> {
        self.check(cache, token)?;
        cache.position += 1;
        let index = cache.position;
        Ok(self.output(self.draft_token(index), index, STREAM_HIDDEN_DRAFT))
    }

    fn target_step_batch(
        &self,
        cache: &mut SyntheticCache,
        tokens: &[TokenId],
    ) -> Result<Vec<StepOutput>> {
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            self.check(cache, t)?;
            cache.position += 1;
            let index = cache.position;
            out.push(self.output(self.target_token(index), index, STREAM_HIDDEN_TARGET));
        }
        Ok(out)
    }

    fn rollback(&self, cache: &mut SyntheticCache, position: usize) -> Result<()> {
        if position > cache.position {
            return Err(Error::RollbackBeyond {
                requested: position,
                position: cache.position,
            });
        }
        cache.position = position;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(v: u32) -> TokenId {
        TokenId::from_raw(v)
    }

    #[test]
    fn rejects_tiny_vocab() {
        assert!(SyntheticPair::new(ThetaSchedule::Constant(0.5), 1, 0).is_err());
    }

    #[test]
    fn full_agreement() {
        let p = SyntheticPair::new(ThetaSchedule::Constant(1.0), 50, 3).unwrap();
        for j in 0..2000 {
            assert_eq!(p.draft_token(j), p.target_token(j));
        }
    }

    #[test]
    fn no_agreement() {
        let p = SyntheticPair::new(ThetaSchedule::Constant(0.0), 2, 3).unwrap();
        for j in 0..2000 {
            assert_ne!(p.draft_token(j), p.target_token(j));
        }
    }

    #[test]
    fn empirical_agreement_matches_theta() {
        let p = SyntheticPair::new(ThetaSchedule::Constant(0.8), 256, 11).unwrap();
        let n = 10_000;
        let agree = (0..n).filter(|&j| p.draft_token(j) == p.target_token(j)).count();
        let rate = agree as f64 / n as f64;
        assert!((rate - 0.8).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn target_logits_follow_script() {
        let p = SyntheticPair::new(ThetaSchedule::Constant(0.5), 32, 5).unwrap();
        let mut c = p.new_cache();
        for step in 0..40u32 {
            let out = p.target_step(&mut c, tok(step % 32)).unwrap();
            assert_eq!(out.argmax(), p.target_token(step as usize + 1));
            assert_eq!(out.logits.len(), 32);
            assert_eq!(out.hidden.len(), HIDDEN);
        }
    }

    #[test]
    fn batch_equals_sequential() {
        let p = SyntheticPair::new(ThetaSchedule::Constant(0.5), 32, 5).unwrap();
        let toks: Vec<TokenId> = (0..9).map(tok).collect();
        let mut a = p.new_cache();
        let batch = p.target_step_batch(&mut a, &toks).unwrap();
        let mut b = p.new_cache();
        let seq: Vec<StepOutput> = toks.iter().map(|&t| p.target_step(&mut b, t).unwrap()).collect();
        assert_eq!(batch, seq);
    }

    #[test]
    fn rollback_bounds() {
        let p = SyntheticPair::new(ThetaSchedule::Constant(0.5), 32, 5).unwrap();
        let mut c = p.new_cache();
        p.target_step_batch(&mut c, &[tok(1), tok(2)]).unwrap();
        assert!(p.rollback(&mut c, 3).is_err());
        p.rollback(&mut c, 2).unwrap();
        p.rollback(&mut c, 1).unwrap();
        assert_eq!(p.position(&c), 1);
    }

    #[test]
    fn foreign_cache_rejected() {
        let a = SyntheticPair::new(ThetaSchedule::Constant(0.5), 32, 5).unwrap();
        let b = SyntheticPair::new(ThetaSchedule::Constant(0.5), 32, 6).unwrap();
        let mut c = a.new_cache();
        assert!(matches!(b.draft_step(&mut c, tok(0)), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn schedules_parse_and_evaluate() {
        let s: ThetaSchedule = "piecewise:0.9@0,0.3@256".parse().unwrap();
        assert_eq!(s.theta(0), 0.9);
        assert_eq!(s.theta(255), 0.9);
        assert_eq!(s.theta(256), 0.3);
        assert_eq!(s.to_string().parse::<ThetaSchedule>().unwrap(), s);
        let s: ThetaSchedule = "sine:0.5,0.25,100".parse().unwrap();
        assert!((s.theta(25) - 0.75).abs() < 1e-12);
        assert!("constant:1.5".parse::<ThetaSchedule>().is_err());
        assert!("piecewise:0.9@5".parse::<ThetaSchedule>().is_err());
        assert!("sine:0.9,0.3,10".parse::<ThetaSchedule>().is_err());
        assert!("gauss:0.1".parse::<ThetaSchedule>().is_err());
    }
}
