//! Agreement labels from drafting rollouts and the logistic fit of the
//! acceptance predictor.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::shuffle;
use crate::checkpoint::{check_kind, Container, KIND_LABELS};
use crate::controllers::{PredictorWeights, MAX_POSITIONS};
use crate::engine::{prefill, verify};
use crate::error::{Error, Result};
use crate::model::{SpeculativeModel, SyntheticPair, ThetaSchedule};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::types::{TokenId, TokenSequence};

/// One row per drafted token: the features the predictor sees when that
/// token has just been drafted, and whether the target agreed with it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    pub d_model: usize,
    /// Row-major `[len, d_model]`.
    pub target_hidden: Vec<f32>,
    /// Row-major `[len, d_model]`.
    pub draft_hidden: Vec<f32>,
    /// 1-based position of the token within its drafting round.
    pub position: Vec<usize>,
    pub label: Vec<bool>,
}

impl LabelSet {
    pub fn empty(d_model: usize) -> Self {
        Self {
            d_model,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        self.label.iter().filter(|&&l| l).count() as f64 / self.len().max(1) as f64
    }

    pub fn target_row(&self, i: usize) -> &[f32] {
        &self.target_hidden[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn draft_row(&self, i: usize) -> &[f32] {
        &self.draft_hidden[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn push(&mut self, target_hidden: &[f32], draft_hidden: &[f32], position: usize, label: bool) {
        self.target_hidden.extend_from_slice(target_hidden);
        self.draft_hidden.extend_from_slice(draft_hidden);
        self.position.push(position);
        self.label.push(label);
    }

    pub fn extend(&mut self, other: LabelSet) {
        self.target_hidden.extend(other.target_hidden);
        self.draft_hidden.extend(other.draft_hidden);
        self.position.extend(other.position);
        self.label.extend(other.label);
    }

    fn select(&self, rows: &[usize]) -> LabelSet {
        let mut out = LabelSet::empty(self.d_model);
        for &i in rows {
            out.push(self.target_row(i), self.draft_row(i), self.position[i], self.label[i]);
        }
        out
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.len();
        let d = self.d_model;
        let mut c = Container::new(KIND_LABELS, serde_json::json!({ "d_model": d, "count": n }));
        c.push("target_hidden", Tensor::from_vec(&[n, d], self.target_hidden.clone())?);
        c.push("draft_hidden", Tensor::from_vec(&[n, d], self.draft_hidden.clone())?);
        c.push("position", Tensor::from_vec(&[n], self.position.iter().map(|&p| p as f32).collect())?);
        c.push("label", Tensor::from_vec(&[n], self.label.iter().map(|&l| l as u8 as f32).collect())?);
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        check_kind(&c, KIND_LABELS)?;
        let meta = |key: &str| {
            c.meta
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("label header lacks {key}")))
        };
        let (d, n) = (meta("d_model")?, meta("count")?);
        let mut take = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>> {
            let t = c.take(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            Ok(t.data().to_vec())
        };
        let target_hidden = take("target_hidden", vec![n, d])?;
        let draft_hidden = take("draft_hidden", vec![n, d])?;
        let position = take("position", vec![n])?
            .into_iter()
            .map(|p| p as usize)
            .collect();
        let label = take("label", vec![n])?.into_iter().map(|l| l > 0.5).collect();
        Ok(Self {
            d_model: d,
            target_hidden,
            draft_hidden,
            position,
            label,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Tokens drafted in every rollout round.
    pub draft_len: usize,
    /// Tokens generated per prompt.
    pub max_new: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            draft_len: MAX_POSITIONS,
            max_new: 64,
        }
    }
}

fn rollout<M: SpeculativeModel>(model: &M, prompt: &TokenSequence, cfg: &LabelConfig) -> Result<LabelSet> {
    let mut labels = LabelSet::empty(model.hidden_size());
    let mut cache = model.new_cache();
    let mut target_hidden = prefill(model, &mut cache, prompt)?;
    let mut pending = *prompt.tokens().last().ok_or(Error::EmptyPrompt)?;
    let mut generated = 0;
    while generated < cfg.max_new {
        let prefix_pos = model.position(&cache);
        let mut drafted: Vec<TokenId> = Vec::with_capacity(cfg.draft_len);
        let mut draft_hidden = Vec::with_capacity(cfg.draft_len);
        let mut cur = pending;
        for _ in 0..cfg.draft_len {
            let out = model.draft_step(&mut cache, cur)?;
            cur = out.argmax();
            drafted.push(cur);
            draft_hidden.push(out.hidden);
        }
        model.rollback(&mut cache, prefix_pos)?;
        let mut fed = Vec::with_capacity(drafted.len() + 1);
        fed.push(pending);
        fed.extend_from_slice(&drafted);
        let outputs = model.target_step_batch(&mut cache, &fed)?;
        for (i, (tok, hd)) in drafted.iter().zip(&draft_hidden).enumerate() {
            labels.push(&target_hidden, hd, i + 1, outputs[i].argmax() == *tok);
        }
        model.rollback(&mut cache, prefix_pos)?;
        let v = verify(model, &mut cache, prefix_pos, pending, &drafted)?;
        generated += v.accepted_drafts + 1;
        pending = v.bonus;
        target_hidden = v.target_hidden;
    }
    Ok(labels)
}

/// Roll out fixed-length drafting rounds from every prompt and label each
/// drafted token with whether the target's greedy choice at that position
/// agrees with it. Rounds advance exactly as the engine does (accepted
/// prefix plus bonus), so features match what the controller observes.
pub fn make_predictor_labels<M: SpeculativeModel>(
    model: &M,
    prompts: &[TokenSequence],
    cfg: &LabelConfig,
) -> Result<LabelSet> {
    if cfg.draft_len == 0 || cfg.max_new == 0 {
        return Err(Error::InvalidConfig("draft_len and max_new must be positive".into()));
    }
    let parts = prompts
        .par_iter()
        .map(|p| rollout(model, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut out = LabelSet::empty(model.hidden_size());
    for p in parts {
        out.extend(p);
    }
    Ok(out)
}

/// The same rows with labels permuted: the chance-level control.
pub fn shuffled_labels(labels: &LabelSet, seed: u64) -> LabelSet {
    let mut out = labels.clone();
    shuffle(&mut out.label, &mut Rng::new(seed));
    out
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
/// `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 pull of `W^i` towards identity and of `Wp` towards zero.
    pub weight_decay: f64,
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 20,
            batch_size: 128,
            weight_decay: 1e-4,
            held_out_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub train_rows: usize,
    pub held_out_rows: usize,
    pub train_auc: Option<f64>,
    pub held_out_auc: Option<f64>,
    pub held_out_positive_rate: f64,
}

/// f64 working copy of the predictor.
struct Fit {
    d: usize,
    w: Vec<f64>,
    p: Vec<f64>,
}

impl Fit {
    fn new(d: usize) -> Self {
        let mut w = vec![0.0; MAX_POSITIONS * d * d];
        for s in 0..MAX_POSITIONS {
            for k in 0..d {
                w[s * d * d + k * d + k] = 1.0;
            }
        }
        Self { d, w, p: vec![0.0; 4 * d] }
    }

    /// `(score, W^i h_T)` for one row.
    fn forward(&self, ht: &[f32], hd: &[f32], pos: usize) -> (f64, Vec<f64>) {
        let d = self.d;
        let w = &self.w[PredictorWeights::slot(pos) * d * d..][..d * d];
        let ft: Vec<f64> = (0..d)
            .map(|r| w[r * d..(r + 1) * d].iter().zip(ht).map(|(&a, &b)| a * b as f64).sum())
            .collect();
        let (l0, l1) = self.p.split_at(2 * d);
        let mut s = 0.0;
        for k in 0..d {
            s += (l1[k] - l0[k]) * ft[k];
            s += (l1[d + k] - l0[d + k]) * hd[k] as f64;
        }
        (s, ft)
    }

    fn scores(&self, set: &LabelSet) -> Vec<f64> {
        (0..set.len())
            .map(|i| self.forward(set.target_row(i), set.draft_row(i), set.position[i]).0)
            .collect()
    }

    fn to_weights(&self) -> Result<PredictorWeights> {
        let d = self.d;
        let w_pos = (0..MAX_POSITIONS)
            .map(|s| Tensor::from_vec(&[d, d], self.w[s * d * d..(s + 1) * d * d].iter().map(|&v| v as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictorWeights {
            d_model: d,
            w_pos,
            w_p: Tensor::from_vec(&[2, 2 * d], self.p.iter().map(|&v| v as f32).collect())?,
        })
    }
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], offset: usize) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (j, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[offset + j], &mut self.v[offset + j]);
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Fit the predictor by minimizing two-class cross-entropy on a seeded
/// training split, starting from `W^i = I`, `Wp = 0`. AUC is reported on
/// the remaining rows.
pub fn train_predictor(labels: &LabelSet, cfg: &PredictorTrainConfig) -> Result<(PredictorWeights, PredictorReport)> {
    let d = labels.d_model;
    if labels.target_hidden.len() != labels.len() * d || labels.draft_hidden.len() != labels.len() * d {
        return Err(Error::DimensionMismatch("label rows do not match d_model".into()));
    }
    let positives = labels.label.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClassLabels);
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.held_out_fraction) {
        return Err(Error::InvalidConfig("invalid predictor training config".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_held = (cfg.held_out_fraction * labels.len() as f64).round() as usize;
    let (held_idx, train_idx) = order.split_at(n_held);
    let (train, held) = (labels.select(train_idx), labels.select(held_idx));

    let mut fit = Fit::new(d);
    let n_w = fit.w.len();
    let mut adam = Adam::new(cfg.learning_rate, n_w + fit.p.len());
    let mut rows: Vec<usize> = (0..train.len()).collect();
    let mut gw = vec![0.0; n_w];
    let mut gp = vec![0.0; fit.p.len()];
    for _ in 0..cfg.epochs {
        shuffle(&mut rows, &mut rng);
        for batch in rows.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gp.iter_mut().for_each(|g| *g = 0.0);
            let mut touched = [false; MAX_POSITIONS];
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (ht, hd, pos) = (train.target_row(i), train.draft_row(i), train.position[i]);
                let (s, ft) = fit.forward(ht, hd, pos);
                let y = if train.label[i] { 1.0 } else { 0.0 };
                let e = (crate::controllers::sigmoid(s) - y) * inv;
                let slot = PredictorWeights::slot(pos);
                touched[slot] = true;
                for k in 0..d {
                    gp[2 * d + k] += e * ft[k];
                    gp[k] -= e * ft[k];
                    gp[3 * d + k] += e * hd[k] as f64;
                    gp[d + k] -= e * hd[k] as f64;
                }
                let gs = &mut gw[slot * d * d..(slot + 1) * d * d];
                for r in 0..d {
                    let coef = e * (fit.p[2 * d + r] - fit.p[r]);
                    if coef != 0.0 {
                        for (g, &h) in gs[r * d..(r + 1) * d].iter_mut().zip(ht) {
                            *g += coef * h as f64;
                        }
                    }
                }
            }
            for (k, g) in gp.iter_mut().enumerate() {
                *g += cfg.weight_decay * fit.p[k];
            }
            adam.t += 1;
            for slot in 0..MAX_POSITIONS {
                if !touched[slot] {
                    continue;
                }
                let base = slot * d * d;
                for r in 0..d {
                    for c in 0..d {
                        let target = if r == c { 1.0 } else { 0.0 };
                        gw[base + r * d + c] += cfg.weight_decay * (fit.w[base + r * d + c] - target);
                    }
                }
                adam.step(&mut fit.w[base..base + d * d], &gw[base..base + d * d], base);
            }
            adam.step(&mut fit.p, &gp, n_w);
        }
    }
    let report = PredictorReport {
        train_rows: train.len(),
        held_out_rows: held.len(),
        train_auc: auc(&fit.scores(&train), &train.label),
        held_out_auc: auc(&fit.scores(&held), &held.label),
        held_out_positive_rate: held.positive_rate(),
    };
    let weights = fit.to_weights()?;
    if !weights.is_finite() {
        return Err(Error::Divergence("predictor weights became non-finite".into()));
    }
    Ok((weights, report))
}

/// Predictor for synthetic pairs, fitted on a sinusoidal schedule that
/// sweeps θ over [0.05, 0.95] so it applies to any schedule.
pub fn synthetic_predictor(vocab_size: usize, seed: u64) -> Result<(PredictorWeights, PredictorReport)> {
    let pair = SyntheticPair::new(ThetaSchedule::Sinusoidal { mean: 0.5, amplitude: 0.45, period: 97.0 }, vocab_size, seed)?;
    let prompts = (0..8u32)
        .map(|i| TokenSequence::from_ids(&[i % vocab_size as u32, 0, 1, 2], vocab_size))
        .collect::<Result<Vec<_>>>()?;
    let cfg = LabelConfig {
        draft_len: MAX_POSITIONS,
        max_new: 400,
    };
    let labels = make_predictor_labels(&pair, &prompts, &cfg)?;
    train_predictor(&labels, &PredictorTrainConfig { seed, ..PredictorTrainConfig::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::cali_predict;

    fn prompts(n: usize, vocab: usize) -> Vec<TokenSequence> {
        (0..n)
            .map(|i| TokenSequence::from_ids(&[(i % vocab) as u32, 1, 2, 3], vocab).unwrap())
            .collect()
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9, 0.2];
        let labels = [false, true, false, true, false, true, true];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
        assert_eq!(auc(&[1.0, 2.0], &[true, true]), None);
        assert_eq!(auc(&[1.0, 2.0, 3.0], &[false, false, true]), Some(1.0));
    }

    #[test]
    fn theta_zero_pair_gives_all_negative_labels() {
        let pair = SyntheticPair::new(ThetaSchedule::Constant(0.0), 64, 3).unwrap();
        let set = make_predictor_labels(&pair, &prompts(4, 64), &LabelConfig::default()).unwrap();
        assert!(!set.is_empty());
        assert!(set.label.iter().all(|&l| !l));
        assert!(matches!(
            train_predictor(&set, &PredictorTrainConfig::default()),
            Err(Error::SingleClassLabels)
        ));
    }

    #[test]
    fn theta_one_pair_gives_all_positive_labels() {
        let pair = SyntheticPair::new(ThetaSchedule::Constant(1.0), 64, 3).unwrap();
        let set = make_predictor_labels(&pair, &prompts(2, 64), &LabelConfig::default()).unwrap();
        assert!(set.label.iter().all(|&l| l));
        assert!(set.position.iter().all(|&p| (1..=MAX_POSITIONS).contains(&p)));
    }

    #[test]
    fn predictor_separates_theta_regimes() {
        let schedule: ThetaSchedule = "piecewise:0.9@0,0.1@200".parse().unwrap();
        let pair = SyntheticPair::new(schedule, 64, 11).unwrap();
        let cfg = LabelConfig {
            draft_len: 6,
            max_new: 390,
        };
        let set = make_predictor_labels(&pair, &prompts(8, 64), &cfg).unwrap();
        let (weights, report) = train_predictor(&set, &PredictorTrainConfig::default()).unwrap();
        assert!(report.held_out_auc.unwrap() > 0.5, "{report:?}");
        let d = set.d_model;
        let high = cali_predict(&weights, &vec![0.0; d], &{
            let mut h = vec![0.0; d];
            h[0] = 0.9;
            h
        }, 1)
        .unwrap();
        let low = cali_predict(&weights, &vec![0.0; d], &{
            let mut h = vec![0.0; d];
            h[0] = 0.1;
            h
        }, 1)
        .unwrap();
        assert!(high > low, "{high} vs {low}");
    }

    #[test]
    fn training_is_deterministic_and_shuffled_control_is_chance() {
        let schedule: ThetaSchedule = "piecewise:0.9@0,0.1@200".parse().unwrap();
        let pair = SyntheticPair::new(schedule, 64, 11).unwrap();
        let cfg = LabelConfig {
            draft_len: 6,
            max_new: 390,
        };
        let set = make_predictor_labels(&pair, &prompts(8, 64), &cfg).unwrap();
        let a = train_predictor(&set, &PredictorTrainConfig::default()).unwrap();
        let b = train_predictor(&set, &PredictorTrainConfig::default()).unwrap();
        assert_eq!(a, b);
        let control = train_predictor(&shuffled_labels(&set, 1), &PredictorTrainConfig::default()).unwrap();
        let auc = control.1.held_out_auc.unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }

    #[test]
    fn synthetic_predictor_tracks_theta() {
        let (w, report) = synthetic_predictor(64, 2).unwrap();
        assert!(report.held_out_auc.unwrap() > 0.6, "{report:?}");
        let at = |theta: f32| {
            let mut h = vec![0.0; w.d_model];
            h[0] = theta;
            cali_predict(&w, &vec![0.0; w.d_model], &h, 1).unwrap()
        };
        assert!(at(0.2) < at(0.5) && at(0.5) < at(0.8));
    }

    #[test]
    fn container_round_trip() {
        let pair = SyntheticPair::new(ThetaSchedule::Constant(0.5), 64, 3).unwrap();
        let set = make_predictor_labels(&pair, &prompts(2, 64), &LabelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.nlm");
        set.save(&path).unwrap();
        assert_eq!(LabelSet::load(&path).unwrap(), set);
    }
}
