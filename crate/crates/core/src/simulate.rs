//! Seeded sweeps of controllers over synthetic draft/target pairs, timed by
//! a synthetic clock instead of wall time.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerConfig, ControllerKind, PredictorWeights};
use crate::engine::{decode, EngineConfig, DEFAULT_DRAFT_CAP};
use crate::error::{Error, Result};
use crate::metrics::{harmonic_mean, simulate_clock};
use crate::model::{SyntheticPair, ThetaSchedule};
use crate::rng::{derive_seed, Rng};
use crate::types::{DecodeTrace, TokenSequence};

pub const DEFAULT_K_GRID: [usize; 8] = [1, 2, 4, 6, 8, 10, 12, 16];

pub const SIM_CSV_HEADER: &str = "controller,k,seed,repetition,rounds,drafted,accepted,generated,\
v_d,r_d,hm,sim_time,sim_time_late";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub schedule: ThetaSchedule,
    pub vocab_size: usize,
    pub prompt_len: usize,
    /// Output length cap, prompt included.
    pub max_len: usize,
    pub t_draft: f64,
    pub t_target: f64,
    pub overhead: f64,
    pub k_grid: Vec<usize>,
    pub beta_ts: bool,
    pub cali_ts: bool,
    pub seeds: Vec<u64>,
    pub repetitions: usize,
    /// Priors and update mode shared by the TS controllers.
    pub controller: ControllerConfig,
    pub draft_cap: usize,
    /// Rounds whose first predicted token lies at or beyond this index are
    /// also summed into `sim_time_late`.
    pub late_from: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            schedule: ThetaSchedule::Constant(0.8),
            vocab_size: 256,
            prompt_len: 16,
            max_len: 528,
            t_draft: 0.1,
            t_target: 1.0,
            overhead: 0.0,
            k_grid: DEFAULT_K_GRID.to_vec(),
            beta_ts: true,
            cali_ts: true,
            seeds: vec![0, 1, 2],
            repetitions: 4,
            controller: ControllerConfig::default(),
            draft_cap: DEFAULT_DRAFT_CAP,
            late_from: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.prompt_len < 1 || self.prompt_len >= self.max_len {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= prompt_len ({}) < max_len ({})",
                self.prompt_len, self.max_len
            )));
        }
        if !(self.t_draft >= 0.0 && self.t_target > 0.0 && self.overhead >= 0.0) {
            return Err(Error::InvalidConfig("costs must be non-negative, t_target > 0".into()));
        }
        if self.k_grid.iter().any(|&k| k < 1) {
            return Err(Error::InvalidConfig("fixed K values must be >= 1".into()));
        }
        if self.seeds.is_empty() || self.repetitions < 1 {
            return Err(Error::InvalidConfig("need at least one seed and repetition".into()));
        }
        self.controller.validate()
    }

    /// Controllers in sweep order.
    pub fn controllers(&self) -> Vec<ControllerKind> {
        let mut v: Vec<_> = self.k_grid.iter().map(|&k| ControllerKind::FixedK(k)).collect();
        if self.beta_ts {
            v.push(ControllerKind::BetaTs);
        }
        if self.cali_ts {
            v.push(ControllerKind::CaliTs);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub controller: String,
    pub k: Option<usize>,
    pub seed: u64,
    pub repetition: usize,
    pub rounds: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub generated: usize,
    pub v_d: f64,
    pub r_d: f64,
    pub hm: f64,
    pub sim_time: f64,
    pub sim_time_late: f64,
}

/// Pair seed for a (seed, repetition) cell; shared by all controllers so
/// they face the same token streams.
pub fn cell_seed(seed: u64, repetition: usize) -> u64 {
    derive_seed(seed, repetition as u64)
}

fn prompt(cfg: &SimConfig, pair_seed: u64) -> Result<TokenSequence> {
    let ids: Vec<u32> = (0..cfg.prompt_len)
        .map(|i| (derive_seed(pair_seed, i as u64 + 1) % cfg.vocab_size as u64) as u32)
        .collect();
    TokenSequence::from_ids(&ids, cfg.vocab_size)
}

/// Synthetic time of rounds whose first predicted token index is at least
/// `from` (indices count from the first prompt token).
pub fn clock_from(trace: &DecodeTrace, from: usize, t_d: f64, t_t: f64, overhead: f64) -> f64 {
    let mut pos = trace.prompt_len;
    let mut total = 0.0;
    for r in &trace.rounds {
        if pos >= from {
            total += r.drafted.len() as f64 * t_d + t_t + overhead;
        }
        pos += r.accepted_drafts + 1;
    }
    total
}

/// Decode one sweep cell and summarise it.
pub fn run_cell(
    cfg: &SimConfig,
    kind: ControllerKind,
    seed: u64,
    repetition: usize,
    predictor: Option<Arc<PredictorWeights>>,
) -> Result<(SimRow, DecodeTrace)> {
    let pair_seed = cell_seed(seed, repetition);
    let pair = SyntheticPair::new(cfg.schedule.clone(), cfg.vocab_size, pair_seed)?;
    let mut engine = EngineConfig::new(
        cfg.max_len,
        ControllerConfig {
            kind,
            ..cfg.controller.clone()
        },
    );
    engine.draft_cap = cfg.draft_cap;
    let mut rng = Rng::new(derive_seed(pair_seed, 0x5eed));
    let trace = decode(&pair, &prompt(cfg, pair_seed)?, &engine, predictor, &mut rng)?;
    let drafted = trace.total_drafted();
    let accepted = trace.total_accepted();
    let generated = trace.generated().len();
    let v_d = accepted as f64 / drafted as f64;
    let r_d = accepted as f64 / generated as f64;
    let row = SimRow {
        controller: kind.label().to_string(),
        k: kind.k(),
        seed,
        repetition,
        rounds: trace.rounds.len(),
        drafted,
        accepted,
        generated,
        v_d,
        r_d,
        hm: harmonic_mean(v_d, r_d),
        sim_time: simulate_clock(&trace, cfg.t_draft, cfg.t_target, cfg.overhead),
        sim_time_late: cfg
            .late_from
            .map(|f| clock_from(&trace, f, cfg.t_draft, cfg.t_target, cfg.overhead))
            .unwrap_or(0.0),
    };
    Ok((row, trace))
}

/// Full sweep in fixed order: controller, then seed, then repetition.
pub fn run_sweep(cfg: &SimConfig, predictor: Option<Arc<PredictorWeights>>) -> Result<Vec<SimRow>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for kind in cfg.controllers() {
        for &seed in &cfg.seeds {
            for rep in 0..cfg.repetitions {
                cells.push((kind, seed, rep));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(kind, seed, rep)| run_cell(cfg, kind, seed, rep, predictor.clone()).map(|r| r.0))
        .collect()
}

/// Mean `sim_time` (or `sim_time_late`) per controller label and K, in
/// sweep order.
pub fn mean_times(rows: &[SimRow], late: bool) -> Vec<(String, Option<usize>, f64)> {
    let mut out: Vec<(String, Option<usize>, f64, usize)> = Vec::new();
    for r in rows {
        let t = if late { r.sim_time_late } else { r.sim_time };
        match out.iter_mut().find(|e| e.0 == r.controller && e.1 == r.k) {
            Some(e) => {
                e.2 += t;
                e.3 += 1;
            }
            None => out.push((r.controller.clone(), r.k, t, 1)),
        }
    }
    out.into_iter().map(|(c, k, s, n)| (c, k, s / n as f64)).collect()
}

pub fn write_sim_csv<W: std::io::Write>(rows: &[SimRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(SIM_CSV_HEADER.split(','))
            .map_err(|e| Error::InvalidMetric(format!("csv: {e}")))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidMetric(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(schedule: ThetaSchedule) -> SimConfig {
        SimConfig {
            schedule,
            max_len: 116,
            seeds: vec![3],
            repetitions: 2,
            cali_ts: false,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_agreement_emits_one_token_per_round() {
        let rows = run_sweep(&small(ThetaSchedule::Constant(0.0)), None).unwrap();
        for r in &rows {
            assert_eq!((r.rounds, r.accepted), (100, 0));
            assert!((r.sim_time - (r.drafted as f64 * 0.1 + 100.0)).abs() < 1e-9);
            if let Some(k) = r.k {
                // Only the last few rounds are shortened by the length cap.
                assert!(r.drafted <= 100 * k && r.drafted + k * k >= 100 * k);
            }
        }
        assert!((rows[0].sim_time - 110.0).abs() < 1e-9);
    }

    #[test]
    fn fixed_one_costs_one_draft_and_one_pass_per_round() {
        let cfg = small(ThetaSchedule::Constant(0.7));
        let (row, _) = run_cell(&cfg, ControllerKind::FixedK(1), 3, 0, None).unwrap();
        assert!((row.sim_time - row.rounds as f64 * 1.1).abs() < 1e-9);
    }

    #[test]
    fn free_drafts_with_full_agreement() {
        let mut cfg = small(ThetaSchedule::Constant(1.0));
        cfg.t_draft = 0.0;
        let (row, _) = run_cell(&cfg, ControllerKind::FixedK(8), 3, 0, None).unwrap();
        assert_eq!(row.rounds, 12);
        assert!((row.sim_time - 12.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let cfg = small(ThetaSchedule::Constant(0.8));
        let a = run_sweep(&cfg, None).unwrap();
        let b = run_sweep(&cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9 * 2);
        assert_eq!(a[0].k, Some(1));
        assert_eq!(a.last().unwrap().controller, "beta-ts");
    }

    #[test]
    fn late_clock_covers_a_suffix() {
        let mut cfg = small(ThetaSchedule::Constant(0.8));
        cfg.late_from = Some(16);
        let (row, _) = run_cell(&cfg, ControllerKind::FixedK(4), 3, 0, None).unwrap();
        assert_eq!(row.sim_time_late, row.sim_time);
        cfg.late_from = Some(10_000);
        let (row, _) = run_cell(&cfg, ControllerKind::FixedK(4), 3, 0, None).unwrap();
        assert_eq!(row.sim_time_late, 0.0);
    }

    #[test]
    fn cali_without_predictor_is_an_error() {
        let mut cfg = small(ThetaSchedule::Constant(0.8));
        cfg.cali_ts = true;
        assert!(run_sweep(&cfg, None).is_err());
    }
}
