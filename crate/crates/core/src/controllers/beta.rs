use rand_distr::{Beta, Distribution};

use crate::controllers::{ControllerDecision, UpdateMode};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Beta(α, β) belief over the continuation probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaState {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaState {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let s = Self { alpha, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.alpha) && ok(self.beta) {
            Ok(())
        } else {
            Err(Error::InvalidState(format!(
                "Beta parameters must be positive and finite, got ({}, {})",
                self.alpha, self.beta
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Draw θ ~ Beta(α, β), then χ ~ Bernoulli(θ).
pub fn beta_sample(state: &BetaState, rng: &mut Rng) -> ControllerDecision {
    let dist = Beta::new(state.alpha, state.beta).expect("validated Beta parameters");
    let theta: f64 = dist.sample(rng);
    ControllerDecision {
        continue_drafting: rng.bernoulli(theta),
        theta_sampled: Some(theta),
    }
}

/// Conjugate update with the round's (successes, trials) under `mode`.
pub fn beta_update(
    state: &BetaState,
    accepted_drafts: usize,
    drafted: usize,
    mode: UpdateMode,
) -> Result<BetaState> {
    state.validate()?;
    if drafted < 1 || accepted_drafts > drafted {
        return Err(Error::InvalidState(format!(
            "beta_update needs 0 <= accepted ({accepted_drafts}) <= drafted ({drafted}), drafted >= 1"
        )));
    }
    let (r, n) = mode.trials(accepted_drafts, drafted);
    Ok(BetaState {
        alpha: state.alpha + r as f64,
        beta: state.beta + (n - r) as f64,
    })
}
