use crate::controllers::ControllerDecision;
use crate::error::{Error, Result};

/// Continue while fewer than `k` tokens have been drafted this round.
pub fn fixed_k_decide(k: usize, drafted_so_far: usize) -> Result<ControllerDecision> {
    if k < 1 {
        return Err(Error::InvalidConfig("fixed K must be >= 1".into()));
    }
    Ok(ControllerDecision {
        continue_drafting: drafted_so_far < k,
        theta_sampled: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_behaviour() {
        assert!(fixed_k_decide(10, 9).unwrap().continue_drafting);
        assert!(!fixed_k_decide(10, 10).unwrap().continue_drafting);
        assert!(!fixed_k_decide(1, 1).unwrap().continue_drafting);
        assert!(fixed_k_decide(0, 0).is_err());
        assert_eq!(fixed_k_decide(3, 1).unwrap().theta_sampled, None);
    }
}
