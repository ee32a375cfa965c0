//! Lossless speculative decoding with an early-exit draft head and
//! Thompson-Sampling control of the drafting length.

pub mod checkpoint;
pub mod controllers;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nano;
pub mod rng;
pub mod simulate;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use model::{SpeculativeModel, StepOutput};
pub use rng::Rng;
pub use types::{DecodeTrace, DraftRound, PhaseTimes, StopReason, TokenId, TokenSequence};
