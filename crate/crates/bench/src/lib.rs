//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use tsdraft::controllers::PredictorWeights;
use tsdraft::nano::{NanoConfig, NanoModel, NanoWeights};
use tsdraft::{Rng, TokenSequence};

/// Randomly initialized nano model of the given shape.
pub fn random_model(cfg: NanoConfig, seed: u64) -> NanoModel {
    let weights = NanoWeights::random(&cfg, &mut Rng::new(seed)).expect("valid config");
    NanoModel::new(cfg, weights).expect("valid weights")
}

/// `len` pseudo-random bytes as a prompt.
pub fn prompt(len: usize, seed: u64) -> TokenSequence {
    let mut rng = Rng::new(seed);
    let bytes: Vec<u8> = (0..len).map(|_| rng.below(256) as u8).collect();
    TokenSequence::from_bytes(&bytes)
}

/// Predictor with identity position maps and small nonzero output weights.
pub fn predictor(d_model: usize, seed: u64) -> Arc<PredictorWeights> {
    let mut p = PredictorWeights::identity(d_model);
    let mut rng = Rng::new(seed);
    for v in p.w_p.data_mut() {
        *v = (rng.uniform() as f32 - 0.5) * 0.1;
    }
    Arc::new(p)
}
