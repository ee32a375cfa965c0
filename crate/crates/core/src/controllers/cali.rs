use rand_distr::{Distribution, Normal};

use crate::controllers::ControllerDecision;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Calibrated-Gaussian belief: prior spread of the model prediction
/// (`sigma_m`), noise of the observed mean (`sigma_s`), the running observed
/// mean `theta_hat`, the verification count `n`, and the token counter `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaliState {
    pub theta_hat: f64,
    pub n: u64,
    pub sigma_m: f64,
    pub sigma_s: f64,
    pub t: u64,
}

impl CaliState {
    pub fn new(theta0: f64, sigma_m: f64, sigma_s: f64) -> Result<Self> {
        let s = Self {
            theta_hat: theta0,
            n: 0,
            sigma_m,
            sigma_s,
            t: 0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta_hat) {
            return Err(Error::InvalidState(format!(
                "theta_hat {} outside [0,1]",
                self.theta_hat
            )));
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.sigma_m) || !pos(self.sigma_s) {
            return Err(Error::InvalidState(format!(
                "sigma_m ({}) and sigma_s ({}) must be positive",
                self.sigma_m, self.sigma_s
            )));
        }
        Ok(())
    }

    /// Running success rate over `successes` of `trials` new Bernoulli
    /// observations; the initial `theta_hat` counts as one observation.
    pub fn observe_trials(&self, successes: usize, trials: usize) -> Result<Self> {
        self.validate()?;
        if successes > trials {
            return Err(Error::InvalidState(format!(
                "{successes} successes out of {trials} trials"
            )));
        }
        let t = self.t + trials as u64;
        Ok(Self {
            theta_hat: (self.theta_hat * (self.t + 1) as f64 + successes as f64) / (t + 1) as f64,
            n: self.n + 1,
            t,
            ..*self
        })
    }
}

/// Posterior mean and variance of θ given the model prediction `theta_m`.
pub fn cali_posterior(state: &CaliState, theta_m: f64) -> (f64, f64) {
    let n = state.n as f64;
    let vm = state.sigma_m * state.sigma_m;
    let vs = state.sigma_s * state.sigma_s;
    let denom = n * vm + vs;
    let mu = (vs / denom) * theta_m + (n * vm / denom) * state.theta_hat;
    let var = vm * vs / (vs + n * vm);
    (mu, var)
}

/// Draw θ ~ N(μ, σ²) clipped to [0, 1], then χ ~ Bernoulli(θ).
pub fn cali_sample(state: &CaliState, theta_m: f64, rng: &mut Rng) -> Result<ControllerDecision> {
    state.validate()?;
    if !(theta_m > 0.0 && theta_m < 1.0) {
        return Err(Error::InvalidState(format!("theta_M {theta_m} outside (0,1)")));
    }
    let (mu, var) = cali_posterior(state, theta_m);
    let dist = Normal::new(mu, var.sqrt()).expect("finite posterior");
    let theta = dist.sample(rng).clamp(0.0, 1.0);
    Ok(ControllerDecision {
        continue_drafting: rng.bernoulli(theta),
        theta_sampled: Some(theta),
    })
}

/// Advance the running mean by one verification that produced
/// `accepted_total` tokens, and count the verification.
pub fn cali_update(state: &CaliState, accepted_total: usize) -> Result<CaliState> {
    state.validate()?;
    if accepted_total < 1 {
        return Err(Error::InvalidState(
            "cali_update needs at least one verified token".into(),
        ));
    }
    let q = accepted_total as f64;
    let t_new = state.t + accepted_total as u64;
    let theta_hat = (state.theta_hat * (t_new as f64 - q + 1.0) + q) / (t_new as f64 + 1.0);
    Ok(CaliState {
        theta_hat,
        n: state.n + 1,
        t: t_new,
        ..*state
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(theta_hat: f64, n: u64, sm: f64, ss: f64) -> CaliState {
        CaliState {
            theta_hat,
            n,
            sigma_m: sm,
            sigma_s: ss,
            t: 0,
        }
    }

    #[test]
    fn zero_verifications_trust_the_model() {
        let (mu, var) = cali_posterior(&state(0.1, 0, 0.2, 0.5), 0.73);
        assert_eq!(mu, 0.73);
        assert!((var - 0.04).abs() < 1e-15);
    }

    #[test]
    fn one_verification_unit_sigmas() {
        let (mu, var) = cali_posterior(&state(0.4, 1, 1.0, 1.0), 0.6);
        assert_eq!(mu, 0.5);
        assert_eq!(var, 0.5);
    }

    #[test]
    fn many_verifications_trust_observations() {
        let (mu, var) = cali_posterior(&state(0.4, 1_000_000, 1.0, 1.0), 0.6);
        assert!((mu - 0.4).abs() < 1e-3);
        assert!(var < 2e-6);
    }

    #[test]
    fn interpolation_is_monotone() {
        let mut prev_mu = f64::INFINITY;
        let mut prev_var = f64::INFINITY;
        for n in 0..200 {
            let (mu, var) = cali_posterior(&state(0.2, n, 0.2, 0.5), 0.9);
            assert!(mu <= prev_mu);
            assert!(var < prev_var);
            prev_mu = mu;
            prev_var = var;
        }
    }

    #[test]
    fn update_examples() {
        let s = state(0.5, 0, 0.2, 0.5);
        let u = cali_update(&s, 3).unwrap();
        assert!((u.theta_hat - 0.875).abs() < 1e-15);
        assert_eq!((u.n, u.t), (1, 3));
        let u = cali_update(&state(0.0, 0, 0.2, 0.5), 1).unwrap();
        assert_eq!(u.theta_hat, 0.5);
        assert!(cali_update(&s, 0).is_err());
    }

    #[test]
    fn repeated_update_matches_direct_iteration() {
        // Oracle: the running-mean recursion written out in exact rationals
        // (numerator/denominator as integers scaled by 2 for θ̂₀ = 1/2).
        let q = 3u64;
        let mut s = state(0.5, 0, 0.2, 0.5);
        let (mut num, mut den) = (1u128, 2u128);
        let mut t = 0u64;
        for _ in 0..50 {
            s = cali_update(&s, q as usize).unwrap();
            t += q;
            // θ̂' = (θ̂·(t − q + 1) + q) / (t + 1)
            num = num * (t - q + 1) as u128 + q as u128 * den;
            den *= (t + 1) as u128;
            let g = gcd(num, den);
            num /= g;
            den /= g;
            assert!((s.theta_hat - num as f64 / den as f64).abs() < 1e-12);
        }
        assert_eq!(s.n, 50);
    }

    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }

    #[test]
    fn observe_trials_is_a_running_rate() {
        let mut s = state(0.5, 0, 0.2, 0.5);
        for _ in 0..1000 {
            s = s.observe_trials(4, 5).unwrap();
        }
        assert!((s.theta_hat - 0.8).abs() < 1e-3);
        assert_eq!(s.n, 1000);
    }

    #[test]
    fn sample_is_clipped_and_validated() {
        let mut rng = Rng::new(5);
        let s = state(1.0, 0, 5.0, 0.5);
        for _ in 0..200 {
            let d = cali_sample(&s, 0.999, &mut rng).unwrap();
            let t = d.theta_sampled.unwrap();
            assert!((0.0..=1.0).contains(&t));
        }
        assert!(cali_sample(&s, 1.0, &mut rng).is_err());
        assert!(cali_sample(&s, 0.0, &mut rng).is_err());
    }
}
