//! Training the nano target, distilling its early-exit head, and fitting
//! the acceptance predictor.
//!
//! All randomness flows from the configured seed. Batches are split into
//! fixed chunks whose gradients are computed in parallel and summed in chunk
//! order, so results do not depend on the number of threads.

mod backprop;
mod corpus;
mod distill;
mod labels;

pub use corpus::{Corpus, BUNDLED_TEXT};
pub use distill::{distill_prompts, sample_prompts, self_distill_generate, DistillConfig};
pub use labels::{synthetic_predictor, 
    auc, make_predictor_labels, shuffled_labels, train_predictor, LabelConfig, LabelSet,
    PredictorReport, PredictorTrainConfig,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nano::{NanoConfig, NanoWeights, ParamGroup};
use crate::rng::{derive_seed, Rng};
use backprop::{sequence_loss, Params, Path};
use corpus::{chunk_windows, random_window, shuffle};

/// Windows per gradient chunk; chunks are the unit of parallel work.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::InvalidConfig(format!(
                "unknown optimizer `{s}` (sgd | momentum | adam)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Momentum => "momentum",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Tokens per training window.
    pub seq_len: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Fraction λ of self-generated windows when training the exit block.
    pub distill_mix: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 4,
            seq_len: 64,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            grad_clip: 1.0,
            seed: 0,
            distill_mix: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &NanoConfig) -> Result<()> {
        let positive = self.learning_rate > 0.0 && self.batch_size > 0 && self.epochs > 0 && self.seq_len > 0;
        if !positive {
            return Err(Error::InvalidConfig(
                "learning_rate, batch_size, epochs and seq_len must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.distill_mix) {
            return Err(Error::InvalidConfig(format!(
                "distill_mix {} outside [0, 1]",
                self.distill_mix
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidConfig("momentum must be in [0,1), grad_clip >= 0".into()));
        }
        if self.seq_len > model.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} exceeds the model's max_seq_len {}",
                self.seq_len, model.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Loss history of one training run (mean per-token cross-entropy, nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub epoch_train_loss: Vec<f64>,
    pub generated_windows: usize,
    pub total_windows: usize,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    clip: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            clip: cfg.grad_clip,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn apply(&mut self, params: &mut Params, grads: &Params, trainable: &[bool]) {
        self.step += 1;
        let g_slices = grads.slices();
        let mut scale = 1.0;
        if self.clip > 0.0 {
            let norm: f64 = g_slices
                .iter()
                .zip(trainable)
                .filter(|(_, &t)| t)
                .flat_map(|(s, _)| s.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > self.clip {
                scale = self.clip / norm;
            }
        }
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (k, (p, g)) in params.slices_mut().into_iter().zip(g_slices).enumerate() {
            if !trainable[k] {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                let gj = g[j] * scale;
                match self.kind {
                    OptimizerKind::Sgd => p[j] -= self.lr * gj,
                    OptimizerKind::Momentum => {
                        m[j] = self.momentum * m[j] + gj;
                        p[j] -= self.lr * m[j];
                    }
                    OptimizerKind::Adam => {
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mean per-token loss over `windows`.
fn mean_loss(p: &Params, cfg: &NanoConfig, windows: &[Vec<usize>], path: Path) -> f64 {
    let (sum, count) = windows
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().fold((0.0, 0usize), |(s, n), w| {
                (s + sequence_loss(p, cfg, w, path, None), n + w.len() - 1)
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    sum / count.max(1) as f64
}

/// Summed gradient of a batch, divided by its token count.
fn batch_gradient(p: &Params, cfg: &NanoConfig, batch: &[Vec<usize>], path: Path) -> (Params, f64) {
    let parts: Vec<(Params, f64, usize)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = p.zeros_like();
            let mut loss = 0.0;
            let mut tokens = 0;
            for w in chunk {
                loss += sequence_loss(p, cfg, w, path, Some(&mut g));
                tokens += w.len() - 1;
            }
            (g, loss, tokens)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut total, mut loss, mut tokens) = iter.next().expect("non-empty batch");
    for (g, l, t) in iter {
        total.add_assign(&g);
        loss += l;
        tokens += t;
    }
    let inv = 1.0 / tokens as f64;
    for s in total.slices_mut() {
        for v in s.iter_mut() {
            *v *= inv;
        }
    }
    (total, loss * inv)
}

/// Windows for one epoch: `total` windows at random offsets, documents
/// drawn in proportion to their length; `n_generated` of them come from
/// `generated` and the rest from `open`.
fn epoch_windows(
    open: &[&[u8]],
    generated: &[&[u8]],
    total: usize,
    n_generated: usize,
    seq_len: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    let pick = |docs: &[&[u8]], rng: &mut Rng| -> Vec<usize> {
        let weights: Vec<u64> = docs.iter().map(|d| d.len() as u64).collect();
        let sum: u64 = weights.iter().sum();
        let mut r = rng.below(sum);
        let mut idx = 0;
        while r >= weights[idx] {
            r -= weights[idx];
            idx += 1;
        }
        random_window(docs[idx], seq_len, rng)
    };
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let from_generated = i < n_generated;
        out.push(pick(if from_generated { generated } else { open }, rng));
    }
    shuffle(&mut out, rng);
    out
}

struct Run<'a> {
    model: &'a NanoConfig,
    cfg: &'a TrainConfig,
    path: Path,
    trainable: Vec<bool>,
}

impl Run<'_> {
    fn train(
        &self,
        params: &mut Params,
        open: &[&[u8]],
        generated: &[&[u8]],
        held_out: &[Vec<usize>],
    ) -> Result<TrainReport> {
        let cfg = self.cfg;
        let initial_loss = mean_loss(params, self.model, held_out, self.path);
        if !initial_loss.is_finite() {
            return Err(Error::Divergence("non-finite loss at initialization".into()));
        }
        let bytes: usize = open.iter().chain(generated).map(|d| d.len()).sum();
        let per_epoch = bytes.div_ceil(cfg.seq_len).max(cfg.batch_size);
        let n_generated = if generated.is_empty() {
            0
        } else {
            (cfg.distill_mix * per_epoch as f64).round() as usize
        };
        if n_generated < per_epoch && open.is_empty() {
            return Err(Error::InvalidConfig("no open documents to train on".into()));
        }
        let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        let mut opt = Optimizer::new(cfg, &sizes);
        let mut steps = 0;
        let mut epoch_train_loss = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut rng = Rng::new(derive_seed(cfg.seed, 1000 + epoch as u64));
            let windows = epoch_windows(open, generated, per_epoch, n_generated, cfg.seq_len, &mut rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for batch in windows.chunks(cfg.batch_size) {
                let (grads, loss) = batch_gradient(params, self.model, batch, self.path);
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite training loss at epoch {epoch}, step {steps}"
                    )));
                }
                opt.apply(params, &grads, &self.trainable);
                sum += loss;
                batches += 1;
                steps += 1;
            }
            epoch_train_loss.push(sum / batches as f64);
        }
        let final_loss = mean_loss(params, self.model, held_out, self.path);
        if !final_loss.is_finite() {
            return Err(Error::Divergence("non-finite held-out loss after training".into()));
        }
        Ok(TrainReport {
            initial_loss,
            final_loss,
            steps,
            epoch_train_loss,
            generated_windows: n_generated * cfg.epochs,
            total_windows: per_epoch * cfg.epochs,
        })
    }
}

fn trainable_mask(model: &NanoConfig, weights: &NanoWeights, groups: &[ParamGroup]) -> Vec<bool> {
    weights
        .named(model)
        .into_iter()
        .map(|(_, _, g)| groups.contains(&g))
        .collect()
}

/// Held-out windows of `corpus` for evaluation.
pub fn held_out_windows(corpus: &Corpus, seq_len: usize) -> Vec<Vec<usize>> {
    chunk_windows(corpus.held_out_docs(), seq_len)
}

/// Train a freshly initialized target on `corpus`. The exit block of the
/// result is a copy of the trained target tail.
pub fn train_target(corpus: &Corpus, model: &NanoConfig, cfg: &TrainConfig) -> Result<(NanoWeights, TrainReport)> {
    model.validate()?;
    cfg.validate(model)?;
    let init = NanoWeights::random(model, &mut Rng::new(derive_seed(cfg.seed, 1)))?;
    let mut params = Params::from_weights(&init);
    let run = Run {
        model,
        cfg,
        path: Path::Target,
        trainable: trainable_mask(
            model,
            &init,
            &[ParamGroup::Embedding, ParamGroup::Shared, ParamGroup::Tail, ParamGroup::TargetHead],
        ),
    };
    let open: Vec<&[u8]> = corpus.train_docs().collect();
    let report = run.train(&mut params, &open, &[], &held_out_windows(corpus, cfg.seq_len))?;
    let mut weights = params.to_weights();
    weights.init_exit_from_target(model)?;
    Ok((weights, report))
}

/// Train only the exit block, exit norm and exit head on a mix of `open`
/// training documents and `generated` ones, in proportion `distill_mix`.
/// Every other tensor of the result is bit-identical to `weights`.
pub fn train_exit(
    weights: &NanoWeights,
    model: &NanoConfig,
    open: &Corpus,
    generated: Option<&Corpus>,
    cfg: &TrainConfig,
) -> Result<(NanoWeights, TrainReport)> {
    model.validate()?;
    cfg.validate(model)?;
    weights.check_shapes(model)?;
    let mut params = Params::from_weights(weights);
    let run = Run {
        model,
        cfg,
        path: Path::Exit,
        trainable: trainable_mask(model, weights, &[ParamGroup::Exit]),
    };
    let open_docs: Vec<&[u8]> = if cfg.distill_mix < 1.0 || generated.is_none() {
        open.train_docs().collect()
    } else {
        Vec::new()
    };
    let gen_docs: Vec<&[u8]> = match generated {
        Some(g) if cfg.distill_mix > 0.0 => g.train_docs().collect(),
        _ => Vec::new(),
    };
    let report = run.train(&mut params, &open_docs, &gen_docs, &held_out_windows(open, cfg.seq_len))?;
    let trained = params.to_weights();
    let mut out = weights.clone();
    out.exit_layers = trained.exit_layers;
    out.exit_norm = trained.exit_norm;
    out.exit_head = trained.exit_head;
    Ok((out, report))
}

/// Mean held-out cross-entropy of the target (`exit = false`) or draft path.
pub fn held_out_loss(weights: &NanoWeights, model: &NanoConfig, corpus: &Corpus, seq_len: usize, exit: bool) -> f64 {
    let p = Params::from_weights(weights);
    let path = if exit { Path::Exit } else { Path::Target };
    mean_loss(&p, model, &held_out_windows(corpus, seq_len), path)
}

/// Mean cross-entropy of the target path over whole documents.
pub fn documents_loss(weights: &NanoWeights, model: &NanoConfig, docs: &[Vec<u8>], seq_len: usize) -> f64 {
    let p = Params::from_weights(weights);
    let windows = chunk_windows(docs.iter().map(|d| d.as_slice()), seq_len);
    mean_loss(&p, model, &windows, Path::Target)
}

/// Mean cross-entropy of the target path over each continuation, given
/// its prompt as context.
pub fn continuation_loss(weights: &NanoWeights, model: &NanoConfig, prompts: &[Vec<u8>], continuations: &[Vec<u8>]) -> f64 {
    let p = Params::from_weights(weights);
    let (sum, count) = prompts
        .par_iter()
        .zip(continuations)
        .map(|(prompt, cont)| {
            let full: Vec<usize> = prompt.iter().chain(cont).map(|&b| b as usize).collect();
            let ctx: Vec<usize> = prompt.iter().map(|&b| b as usize).collect();
            let total = sequence_loss(&p, model, &full, Path::Target, None);
            let head = if ctx.len() > 1 {
                sequence_loss(&p, model, &ctx, Path::Target, None)
            } else {
                0.0
            };
            (total - head, cont.len())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    sum / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            seq_len: 32,
            ..TrainConfig::default()
        }
    }

    fn tiny() -> NanoConfig {
        NanoConfig {
            d_model: 16,
            n_layers: 2,
            d_ff: 32,
            max_seq_len: 64,
            exit_after: 1,
            ..NanoConfig::tiny()
        }
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let corpus = Corpus::bundled(0);
        let cfg = NanoConfig::tiny();
        let w = NanoWeights::random(&cfg, &mut Rng::new(1)).unwrap();
        let loss = held_out_loss(&w, &cfg, &corpus, 64, false);
        assert!((loss - 256f64.ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn target_training_reduces_loss_deterministically() {
        let corpus = Corpus::bundled(0);
        let (w1, r1) = train_target(&corpus, &tiny(), &quick()).unwrap();
        let (w2, r2) = train_target(&corpus, &tiny(), &quick()).unwrap();
        assert!(r1.final_loss < r1.initial_loss, "{r1:?}");
        assert_eq!(w1, w2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn exit_training_freezes_everything_else() {
        let corpus = Corpus::bundled(0);
        let model = tiny();
        let (w, _) = train_target(&corpus, &model, &quick()).unwrap();
        let (e, report) = train_exit(&w, &model, &corpus, None, &quick()).unwrap();
        for ((name, a, group), (_, b, _)) in w.named(&model).into_iter().zip(e.named(&model)) {
            if group == ParamGroup::Exit {
                continue;
            }
            assert_eq!(a, b, "{name} changed");
        }
        assert_ne!(w.exit_head, e.exit_head);
        assert!(report.final_loss < report.initial_loss, "{report:?}");
        assert_eq!(report.generated_windows, 0);
    }

    #[test]
    fn mix_accounting() {
        let corpus = Corpus::bundled(0);
        let model = tiny();
        let (w, _) = train_target(&corpus, &model, &quick()).unwrap();
        let gen = Corpus::generated(vec![b"the river and the bridge".to_vec(); 20]).unwrap();
        for (mix, expect_all, expect_none) in [(0.0, false, true), (1.0, true, false), (0.5, false, false)] {
            let cfg = TrainConfig {
                distill_mix: mix,
                epochs: 1,
                ..quick()
            };
            let (_, r) = train_exit(&w, &model, &corpus, Some(&gen), &cfg).unwrap();
            assert_eq!(r.generated_windows == r.total_windows, expect_all);
            assert_eq!(r.generated_windows == 0, expect_none);
            let realized = r.generated_windows as f64 / r.total_windows as f64;
            assert!((realized - mix).abs() <= cfg.batch_size as f64 / r.total_windows as f64);
        }
    }

    #[test]
    fn config_validation() {
        let model = tiny();
        assert!(TrainConfig { distill_mix: 1.5, ..quick() }.validate(&model).is_err());
        assert!(TrainConfig { seq_len: 1000, ..quick() }.validate(&model).is_err());
        assert!(TrainConfig { epochs: 0, ..quick() }.validate(&model).is_err());
        assert!("adam".parse::<OptimizerKind>().is_ok());
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
