//! Acceptance statistics, the harmonic-mean score, and the analytic
//! time/speedup model.
//!
//! `v_d` is the fraction of drafted tokens the target accepted. `r_d` is the
//! fraction of generated tokens that came from accepted drafts; bonus tokens
//! from the target count only in the denominator of `r_d`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::DecodeTrace;

pub const CSV_HEADER: &str = "run_id,controller,k,seed,v_d,r_d,hm,alpha,measured_s,model_s,\
speedup_measured,speedup_model,draft_s,verify_s,sample_s,other_s";

/// `(v_d, r_d)` of a finished trace.
pub fn acceptance_stats(trace: &DecodeTrace) -> Result<(f64, f64)> {
    let drafted = trace.total_drafted();
    if trace.rounds.is_empty() || drafted == 0 {
        return Err(Error::NoDraftedTokens);
    }
    let generated = trace.generated().len();
    if generated == 0 {
        return Err(Error::InvalidMetric("trace generated no tokens".into()));
    }
    let accepted = trace.total_accepted().min(generated) as f64;
    Ok((accepted / drafted as f64, accepted / generated as f64))
}

/// `200·v·r/(v + r)`, or 0 when both are 0.
pub fn harmonic_mean(v_d: f64, r_d: f64) -> f64 {
    if v_d + r_d == 0.0 {
        0.0
    } else {
        200.0 * (v_d * r_d) / (v_d + r_d)
    }
}

/// Predicted end-to-end time for `len` tokens with per-token draft cost
/// `t_d` and target cost `t_t`.
pub fn model_time(v_d: f64, r_d: f64, len: f64, t_d: f64, t_t: f64) -> Result<f64> {
    if !(v_d > 0.0) {
        return Err(Error::InvalidMetric(format!("model_time needs v_d > 0, got {v_d}")));
    }
    if !(len > 0.0 && t_d >= 0.0 && t_t > 0.0) {
        return Err(Error::InvalidMetric(format!(
            "model_time needs len > 0, t_d >= 0, t_t > 0 (got {len}, {t_d}, {t_t})"
        )));
    }
    Ok((r_d * len / v_d) * t_d + (1.0 - r_d) * len * t_t)
}

/// Predicted speedup over target-only decoding, with `alpha = t_d / t_t`.
pub fn model_speedup(v_d: f64, r_d: f64, alpha: f64) -> Result<f64> {
    if !(v_d > 0.0 && v_d <= 1.0) || !(0.0..=1.0).contains(&r_d) || !(alpha >= 0.0) {
        return Err(Error::InvalidMetric(format!(
            "model_speedup inputs out of range: v_d={v_d}, r_d={r_d}, alpha={alpha}"
        )));
    }
    let denom = (alpha - v_d) * r_d + v_d;
    if !(denom > 0.0) {
        return Err(Error::InvalidMetric(format!("unbounded speedup (denominator {denom})")));
    }
    Ok(v_d / denom)
}

/// Synthetic clock: every round costs its drafts, one target pass, and a
/// fixed verification overhead.
pub fn simulate_clock(trace: &DecodeTrace, t_d: f64, t_t: f64, overhead: f64) -> f64 {
    trace
        .rounds
        .iter()
        .map(|r| r.drafted.len() as f64 * t_d + t_t + overhead)
        .sum()
}

/// Per-token draft and target costs used by the analytic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub t_draft: f64,
    pub t_target: f64,
}

impl TimingModel {
    pub fn alpha(&self) -> f64 {
        self.t_draft / self.t_target
    }
}

/// Identifies one run in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub controller: String,
    pub k: Option<usize>,
    pub seed: u64,
}

/// One CSV/JSON row. Undefined quantities (for example the model time when
/// nothing was accepted) are empty in CSV and `null` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub controller: String,
    pub k: Option<usize>,
    pub seed: u64,
    pub v_d: f64,
    pub r_d: f64,
    pub hm: f64,
    pub alpha: f64,
    pub measured_s: f64,
    pub model_s: Option<f64>,
    pub speedup_measured: Option<f64>,
    pub speedup_model: Option<f64>,
    pub draft_s: f64,
    pub verify_s: f64,
    pub sample_s: f64,
    pub other_s: f64,
}

impl MetricsReport {
    /// `baseline_s` is the measured time of target-only decoding for the
    /// same prompt and length, when available.
    pub fn from_trace(
        run: RunInfo,
        trace: &DecodeTrace,
        timing: TimingModel,
        baseline_s: Option<f64>,
    ) -> Result<Self> {
        let (v_d, r_d) = acceptance_stats(trace)?;
        let len = trace.generated().len() as f64;
        let w = trace.wall_times;
        let measured_s = w.total();
        Ok(Self {
            run_id: run.run_id,
            controller: run.controller,
            k: run.k,
            seed: run.seed,
            v_d,
            r_d,
            hm: harmonic_mean(v_d, r_d),
            alpha: timing.alpha(),
            measured_s,
            model_s: model_time(v_d, r_d, len, timing.t_draft, timing.t_target).ok(),
            speedup_measured: baseline_s.filter(|_| measured_s > 0.0).map(|b| b / measured_s),
            speedup_model: model_speedup(v_d, r_d, timing.alpha()).ok(),
            draft_s: w.drafting,
            verify_s: w.verification,
            sample_s: w.sampling,
            other_s: w.other,
        })
    }

    pub fn breakdown_total(&self) -> f64 {
        self.draft_s + self.verify_s + self.sample_s + self.other_s
    }
}

/// Write rows as CSV with the fixed header.
pub fn write_csv<W: Write>(rows: &[MetricsReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidMetric(format!("csv: {e}")))?;
    }
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))
            .map_err(|e| Error::InvalidMetric(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsReport>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::InvalidMetric(format!("csv: {e}"))))
        .collect()
}

/// Write rows as JSON lines.
pub fn write_json_lines<W: Write>(rows: &[MetricsReport], mut out: W) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<json output>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DraftRound, StopReason, TokenId, TokenSequence};

    fn trace_with(rounds: &[(usize, usize)]) -> DecodeTrace {
        let mut t = DecodeTrace::new(TokenSequence::from_ids(&[1, 2], 8).unwrap()).unwrap();
        for &(d, a) in rounds {
            t.push_round(DraftRound {
                drafted: TokenSequence::from_ids(&vec![3; d], 8).unwrap(),
                accepted_drafts: a,
                bonus: TokenId::from_raw(4),
                stop_reason: if a < d {
                    StopReason::Rejection
                } else {
                    StopReason::ControllerStop
                },
                draft_time: 0.25,
                verify_time: 0.5,
                sample_time: 0.125,
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn one_round_counts() {
        let (v, r) = acceptance_stats(&trace_with(&[(4, 2)])).unwrap();
        assert_eq!(v, 0.5);
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nothing_accepted() {
        assert_eq!(acceptance_stats(&trace_with(&[(1, 0), (1, 0)])).unwrap(), (0.0, 0.0));
        assert!(acceptance_stats(&trace_with(&[])).is_err());
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(0.5, 0.5), 50.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(0.74, 0.88) - 80.35).abs() < 0.5);
        assert!((harmonic_mean(0.90, 0.70) - 78.75).abs() < 1e-12);
    }

    #[test]
    fn model_time_examples() {
        assert_eq!(model_time(0.4, 0.0, 512.0, 1.0, 10.0).unwrap(), 5120.0);
        assert_eq!(model_time(1.0, 1.0, 512.0, 1.0, 10.0).unwrap(), 512.0);
        let t = model_time(0.5, 2.0 / 3.0, 512.0, 1.0, 10.0).unwrap();
        assert!((t - (2.0 / 3.0 * 512.0 / 0.5 + 512.0 * 10.0 / 3.0)).abs() < 1e-9);
        assert!((t - 2389.33).abs() < 0.01);
        assert!(model_time(0.0, 0.5, 512.0, 1.0, 10.0).is_err());
    }

    #[test]
    fn speedup_examples() {
        for r in [0.0, 0.3, 1.0] {
            assert_eq!(model_speedup(0.4, r, 0.4).unwrap(), 1.0);
        }
        assert_eq!(model_speedup(1.0, 0.5, 0.0).unwrap(), 2.0);
        assert!(model_speedup(0.0, 0.5, 0.1).is_err());
    }

    #[test]
    fn clock_for_single_token_rounds() {
        let t = trace_with(&[(1, 1), (1, 0), (1, 1)]);
        assert!((simulate_clock(&t, 0.1, 1.0, 0.0) - 3.3).abs() < 1e-12);
        assert!((simulate_clock(&t, 0.1, 1.0, 0.5) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn report_breakdown_sums_to_measured() {
        let t = trace_with(&[(4, 2), (3, 3)]);
        let run = RunInfo {
            run_id: "r0".into(),
            controller: "fixed".into(),
            k: Some(4),
            seed: 1,
        };
        let rep = MetricsReport::from_trace(
            run,
            &t,
            TimingModel {
                t_draft: 0.1,
                t_target: 1.0,
            },
            Some(3.0),
        )
        .unwrap();
        assert!((rep.breakdown_total() - rep.measured_s).abs() < 1e-9);
        assert_eq!(rep.v_d, 5.0 / 7.0);
        assert_eq!(rep.speedup_measured, Some(3.0 / 1.75));
    }

    #[test]
    fn csv_header_and_round_trip() {
        let t = trace_with(&[(1, 0)]);
        let rep = MetricsReport::from_trace(
            RunInfo {
                run_id: "x".into(),
                controller: "beta-ts".into(),
                k: None,
                seed: 2,
            },
            &t,
            TimingModel {
                t_draft: 0.1,
                t_target: 1.0,
            },
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&[rep.clone(), rep.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(read_csv(&buf[..]).unwrap(), vec![rep.clone(), rep.clone()]);
        let mut again = Vec::new();
        write_csv(&[rep.clone(), rep], &mut again).unwrap();
        assert_eq!(buf, again);

        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim_end(), CSV_HEADER);
    }
}
