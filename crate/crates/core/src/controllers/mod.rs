//! Drafting-length controllers.
//!
//! After every drafted token the engine asks its [`Controller`] whether to
//! keep drafting, and after every verification it reports how many drafted
//! tokens the target accepted.

mod beta;
mod cali;
mod fixed;
mod predictor;

pub use beta::{beta_sample, beta_update, BetaState};
pub use cali::{cali_posterior, cali_sample, cali_update, CaliState};
pub use fixed::fixed_k_decide;
pub use predictor::{cali_predict, PredictorWeights, MAX_POSITIONS};
pub(crate) use predictor::sigmoid;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Outcome of one controller consultation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerDecision {
    pub continue_drafting: bool,
    /// θ drawn for this decision; `None` for fixed-K.
    pub theta_sampled: Option<f64>,
}

/// How verification results are booked as Bernoulli trials.
///
/// With `q` accepted draft tokens out of `d` drafted:
///
/// * `Literal`: `r = max(q − 1, 0)` successes out of `n = min(q + 1, d)`
///   trials; the calibrated controller's running mean absorbs `q + 1`
///   tokens per round (accepted drafts plus the target's token).
/// * `ExactCount`: `r = q` successes out of `n = q + [q < d]` trials, and
///   the calibrated running mean is the plain success rate of those trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    #[default]
    Literal,
    ExactCount,
}

impl UpdateMode {
    /// `(successes, trials)` booked for one round.
    pub fn trials(self, accepted: usize, drafted: usize) -> (usize, usize) {
        match self {
            UpdateMode::Literal => (accepted.saturating_sub(1), (accepted + 1).min(drafted)),
            UpdateMode::ExactCount => (accepted, accepted + usize::from(accepted < drafted)),
        }
    }
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(UpdateMode::Literal),
            "exact-count" => Ok(UpdateMode::ExactCount),
            _ => Err(Error::InvalidConfig(format!(
                "unknown update mode `{s}` (literal | exact-count)"
            ))),
        }
    }
}

impl std::fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateMode::Literal => "literal",
            UpdateMode::ExactCount => "exact-count",
        })
    }
}

/// Which controller to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    FixedK(usize),
    BetaTs,
    CaliTs,
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::FixedK(_) => "fixed",
            ControllerKind::BetaTs => "beta-ts",
            ControllerKind::CaliTs => "cali-ts",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            ControllerKind::FixedK(k) => Some(*k),
            _ => None,
        }
    }
}

/// Controller choice plus the prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub alpha0: f64,
    pub beta0: f64,
    pub sigma_m: f64,
    pub sigma_s: f64,
    pub theta0: f64,
    pub mode: UpdateMode,
    /// Calibrate the model prediction with observed acceptances. Off means
    /// the calibrated controller relies on the predictor alone.
    pub cali_sampling: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::BetaTs,
            alpha0: 1.0,
            beta0: 1.0,
            sigma_m: 0.2,
            sigma_s: 0.5,
            theta0: 0.5,
            mode: UpdateMode::Literal,
            cali_sampling: true,
        }
    }
}

impl ControllerConfig {
    pub fn with_kind(kind: ControllerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ControllerKind::FixedK(k) = self.kind {
            if k < 1 {
                return Err(Error::InvalidConfig("fixed K must be >= 1".into()));
            }
        }
        BetaState::new(self.alpha0, self.beta0)?;
        CaliState::new(self.theta0, self.sigma_m, self.sigma_s)?;
        Ok(())
    }
}

/// Inputs available to a controller when it is consulted.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    /// Tokens drafted so far in this round (≥ 1).
    pub drafted_so_far: usize,
    /// Final-layer target state at the last verified position.
    pub target_hidden: &'a [f32],
    /// Draft state at the token just drafted.
    pub draft_hidden: &'a [f32],
}

/// Per-session controller state.
#[derive(Debug, Clone)]
pub enum Controller {
    FixedK(usize),
    BetaTs {
        state: BetaState,
        mode: UpdateMode,
    },
    CaliTs {
        state: CaliState,
        predictor: Arc<PredictorWeights>,
        mode: UpdateMode,
        sampling: bool,
    },
}

impl Controller {
    /// `predictor` is required for the calibrated controller.
    pub fn new(cfg: &ControllerConfig, predictor: Option<Arc<PredictorWeights>>) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ControllerKind::FixedK(k) => Controller::FixedK(k),
            ControllerKind::BetaTs => Controller::BetaTs {
                state: BetaState::new(cfg.alpha0, cfg.beta0)?,
                mode: cfg.mode,
            },
            ControllerKind::CaliTs => Controller::CaliTs {
                state: CaliState::new(cfg.theta0, cfg.sigma_m, cfg.sigma_s)?,
                predictor: predictor.ok_or_else(|| {
                    Error::InvalidConfig("calibrated controller needs a predictor".into())
                })?,
                mode: cfg.mode,
                sampling: cfg.cali_sampling,
            },
        })
    }

    pub fn uses_hidden_states(&self) -> bool {
        matches!(self, Controller::CaliTs { .. })
    }

    pub fn decide(&mut self, ctx: &DecisionContext<'_>, rng: &mut Rng) -> Result<ControllerDecision> {
        match self {
            Controller::FixedK(k) => fixed_k_decide(*k, ctx.drafted_so_far),
            Controller::BetaTs { state, .. } => Ok(beta_sample(state, rng)),
            Controller::CaliTs {
                state,
                predictor,
                sampling,
                ..
            } => {
                let theta_m = cali_predict(
                    predictor,
                    ctx.target_hidden,
                    ctx.draft_hidden,
                    ctx.drafted_so_far,
                )?;
                if *sampling {
                    cali_sample(state, theta_m, rng)
                } else {
                    let model_only = CaliState { n: 0, ..*state };
                    cali_sample(&model_only, theta_m, rng)
                }
            }
        }
    }

    /// Book one verification round.
    pub fn observe(&mut self, accepted: usize, drafted: usize) -> Result<()> {
        match self {
            Controller::FixedK(_) => Ok(()),
            Controller::BetaTs { state, mode } => {
                *state = beta_update(state, accepted, drafted, *mode)?;
                Ok(())
            }
            Controller::CaliTs { state, mode, .. } => {
                if accepted > drafted || drafted == 0 {
                    return Err(Error::InvalidState(format!(
                        "accepted {accepted} of {drafted} drafted"
                    )));
                }
                *state = match mode {
                    UpdateMode::Literal => cali_update(state, accepted + 1)?,
                    UpdateMode::ExactCount => {
                        let (r, n) = mode.trials(accepted, drafted);
                        state.observe_trials(r, n)?
                    }
                };
                Ok(())
            }
        }
    }

    /// Posterior point estimate of the continuation probability, when the
    /// controller keeps one.
    pub fn estimate(&self) -> Option<f64> {
        match self {
            Controller::FixedK(_) => None,
            Controller::BetaTs { state, .. } => Some(state.mean()),
            Controller::CaliTs { state, .. } => Some(state.theta_hat),
        }
    }
}
