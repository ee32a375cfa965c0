//! Flat `key = value` run configuration.
//!
//! Every setting has a dotted key (`engine.max_new = 64`). Files may contain
//! `#` comments and blank lines. Unknown and repeated keys are errors, and
//! `--set` flags are applied after the file. [`RunConfig::dump`] writes every
//! key, so a dumped file reproduces the run that produced it.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use tsdraft::controllers::{ControllerConfig, ControllerKind, UpdateMode};
use tsdraft::engine::DEFAULT_DRAFT_CAP;
use tsdraft::model::ThetaSchedule;
use tsdraft::nano::NanoConfig;
use tsdraft::simulate::SimConfig;
use tsdraft::training::{DistillConfig, LabelConfig, OptimizerKind, PredictorTrainConfig, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value `{value}` for `{key}`: {msg}")]
    BadValue { key: String, value: String, msg: String },

    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },

    #[error("cannot read config file {path}: {msg}")]
    Read { path: String, msg: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parse and render one config value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_values {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_values!(usize, u64, u32, f64, f32, bool, String, OptimizerKind, UpdateMode, ThetaSchedule);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            Err("empty path".into())
        } else {
            Ok(PathBuf::from(s))
        }
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() || s == "none" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map(T::render).unwrap_or_else(|| "none".into())
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(T::parse_value)
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

/// Controller family as written in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerName {
    Fixed,
    BetaTs,
    CaliTs,
}

impl FromStr for ControllerName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "beta-ts" => Ok(Self::BetaTs),
            "cali-ts" => Ok(Self::CaliTs),
            _ => Err(format!("unknown controller `{s}` (fixed | beta-ts | cali-ts)")),
        }
    }
}

impl Display for ControllerName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::BetaTs => "beta-ts",
            Self::CaliTs => "cali-ts",
        })
    }
}

scalar_values!(ControllerName);

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSection {
    /// Plain-text corpus; the bundled text when unset.
    pub path: Option<PathBuf>,
    pub held_out: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSection {
    pub prompts: usize,
    pub prompt_len: usize,
    /// Epochs of exit-block training.
    pub epochs: usize,
    pub generate: DistillConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSection {
    pub prompts: usize,
    pub prompt_len: usize,
    pub labels: LabelConfig,
    pub fit: PredictorTrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineSection {
    /// Tokens generated after each prompt.
    pub max_new: usize,
    pub draft_cap: usize,
    pub stop_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSection {
    pub kind: ControllerName,
    pub k: usize,
    pub params: ControllerConfig,
}

impl ControllerSection {
    pub fn kind(&self) -> ControllerKind {
        match self.kind {
            ControllerName::Fixed => ControllerKind::FixedK(self.k),
            ControllerName::BetaTs => ControllerKind::BetaTs,
            ControllerName::CaliTs => ControllerKind::CaliTs,
        }
    }

    pub fn resolved(&self) -> ControllerConfig {
        ControllerConfig {
            kind: self.kind(),
            ..self.params.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingSection {
    /// Per-token draft cost for the analytic model; measured when unset.
    pub t_draft: Option<f64>,
    /// Per-token target cost for the analytic model; measured when unset.
    pub t_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub params: SimConfig,
    /// Seed for fitting the synthetic predictor used by Cali-TS.
    pub predictor_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub k_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_new: usize,
    pub ablations: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSection {
    /// Target checkpoint written by `train-target`.
    pub checkpoint: PathBuf,
    /// Distilled bundle written by `distill`.
    pub bundle: PathBuf,
    pub predictor: PathBuf,
    pub labels: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub out_csv: Option<PathBuf>,
    pub out_json: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub model: NanoConfig,
    pub train: TrainConfig,
    pub distill: DistillSection,
    pub predictor: PredictorSection,
    pub engine: EngineSection,
    pub controller: ControllerSection,
    pub timing: TimingSection,
    pub decode: DecodeSection,
    pub sim: SimSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSection {
                path: None,
                held_out: 0.1,
                seed: 0,
            },
            model: NanoConfig::tiny(),
            train: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
            distill: DistillSection {
                prompts: 64,
                prompt_len: 16,
                epochs: 20,
                generate: DistillConfig::default(),
            },
            predictor: PredictorSection {
                prompts: 40,
                prompt_len: 16,
                labels: LabelConfig::default(),
                fit: PredictorTrainConfig::default(),
            },
            engine: EngineSection {
                max_new: 64,
                draft_cap: DEFAULT_DRAFT_CAP,
                stop_tokens: Vec::new(),
            },
            controller: ControllerSection {
                kind: ControllerName::BetaTs,
                k: 10,
                params: ControllerConfig::default(),
            },
            timing: TimingSection {
                t_draft: None,
                t_target: None,
            },
            decode: DecodeSection { seed: 0 },
            sim: SimSection {
                params: SimConfig::default(),
                predictor_seed: 0,
            },
            bench: BenchSection {
                k_grid: vec![1, 2, 4, 6, 8, 10],
                seeds: vec![0, 1, 2],
                prompts: 8,
                prompt_len: 16,
                max_new: 64,
                ablations: true,
            },
            paths: PathsSection {
                checkpoint: PathBuf::from("target.nlm"),
                bundle: PathBuf::from("bundle.nlm"),
                predictor: PathBuf::from("predictor.nlm"),
                labels: None,
                prompts: None,
                out_csv: None,
                out_json: None,
                trace: None,
            },
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in dump order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = |msg: String| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    msg,
                };
                match key {
                    $($key => self.$($field).+ = ConfigValue::parse_value(value).map_err(bad)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "corpus.path" => corpus.path;
    "corpus.held_out" => corpus.held_out;
    "corpus.seed" => corpus.seed;
    "model.vocab_size" => model.vocab_size;
    "model.d_model" => model.d_model;
    "model.n_heads" => model.n_heads;
    "model.n_layers" => model.n_layers;
    "model.d_ff" => model.d_ff;
    "model.max_seq_len" => model.max_seq_len;
    "model.exit_after" => model.exit_after;
    "model.exit_depth" => model.exit_depth;
    "model.norm_eps" => model.norm_eps;
    "train.learning_rate" => train.learning_rate;
    "train.batch_size" => train.batch_size;
    "train.epochs" => train.epochs;
    "train.seq_len" => train.seq_len;
    "train.optimizer" => train.optimizer;
    "train.momentum" => train.momentum;
    "train.grad_clip" => train.grad_clip;
    "train.seed" => train.seed;
    "train.distill_mix" => train.distill_mix;
    "distill.prompts" => distill.prompts;
    "distill.prompt_len" => distill.prompt_len;
    "distill.epochs" => distill.epochs;
    "distill.continuation_len" => distill.generate.continuation_len;
    "distill.greedy_fraction" => distill.generate.greedy_fraction;
    "distill.temperature" => distill.generate.temperature;
    "distill.seed" => distill.generate.seed;
    "predictor.prompts" => predictor.prompts;
    "predictor.prompt_len" => predictor.prompt_len;
    "predictor.draft_len" => predictor.labels.draft_len;
    "predictor.max_new" => predictor.labels.max_new;
    "predictor.learning_rate" => predictor.fit.learning_rate;
    "predictor.epochs" => predictor.fit.epochs;
    "predictor.batch_size" => predictor.fit.batch_size;
    "predictor.weight_decay" => predictor.fit.weight_decay;
    "predictor.held_out_fraction" => predictor.fit.held_out_fraction;
    "predictor.seed" => predictor.fit.seed;
    "engine.max_new" => engine.max_new;
    "engine.draft_cap" => engine.draft_cap;
    "engine.stop_tokens" => engine.stop_tokens;
    "controller.kind" => controller.kind;
    "controller.k" => controller.k;
    "controller.alpha0" => controller.params.alpha0;
    "controller.beta0" => controller.params.beta0;
    "controller.sigma_m" => controller.params.sigma_m;
    "controller.sigma_s" => controller.params.sigma_s;
    "controller.theta0" => controller.params.theta0;
    "controller.mode" => controller.params.mode;
    "controller.cali_sampling" => controller.params.cali_sampling;
    "timing.t_draft" => timing.t_draft;
    "timing.t_target" => timing.t_target;
    "decode.seed" => decode.seed;
    "sim.schedule" => sim.params.schedule;
    "sim.vocab_size" => sim.params.vocab_size;
    "sim.prompt_len" => sim.params.prompt_len;
    "sim.max_len" => sim.params.max_len;
    "sim.t_draft" => sim.params.t_draft;
    "sim.t_target" => sim.params.t_target;
    "sim.overhead" => sim.params.overhead;
    "sim.k_grid" => sim.params.k_grid;
    "sim.beta_ts" => sim.params.beta_ts;
    "sim.cali_ts" => sim.params.cali_ts;
    "sim.seeds" => sim.params.seeds;
    "sim.repetitions" => sim.params.repetitions;
    "sim.draft_cap" => sim.params.draft_cap;
    "sim.late_from" => sim.params.late_from;
    "sim.predictor_seed" => sim.predictor_seed;
    "bench.k_grid" => bench.k_grid;
    "bench.seeds" => bench.seeds;
    "bench.prompts" => bench.prompts;
    "bench.prompt_len" => bench.prompt_len;
    "bench.max_new" => bench.max_new;
    "bench.ablations" => bench.ablations;
    "paths.checkpoint" => paths.checkpoint;
    "paths.bundle" => paths.bundle;
    "paths.predictor" => paths.predictor;
    "paths.labels" => paths.labels;
    "paths.prompts" => paths.prompts;
    "paths.out_csv" => paths.out_csv;
    "paths.out_json" => paths.out_json;
    "paths.trace" => paths.trace;
}

/// `(line, key, value)` entries of a config text.
pub fn parse_entries(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |msg: String| ConfigError::Syntax {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected `key = value`, found `{line}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(syntax("empty key".into()));
        }
        if !seen.insert(key.to_string()) {
            return Err(syntax(format!("key `{key}` set twice")));
        }
        out.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (line, key, value) in parse_entries(text, origin)? {
            cfg.set(&key, &value).map_err(|e| match e {
                ConfigError::UnknownKey(_) => ConfigError::Syntax {
                    path: origin.to_string(),
                    line,
                    msg: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: assignment.to_string(),
            value: String::new(),
            msg: "expected KEY=VALUE".into(),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let head = key.split('.').next().unwrap_or("");
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = head;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    /// Cross-field checks shared by every command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: tsdraft::Error| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(invalid)?;
        self.train.validate(&self.model).map_err(invalid)?;
        self.distill.generate.validate().map_err(invalid)?;
        self.controller.resolved().validate().map_err(invalid)?;
        let mut sim = self.sim.params.clone();
        sim.controller = self.controller.params.clone();
        sim.validate().map_err(invalid)?;
        if !(0.0..1.0).contains(&self.corpus.held_out) {
            return Err(ConfigError::Invalid(format!(
                "corpus.held_out {} outside [0, 1)",
                self.corpus.held_out
            )));
        }
        if self.engine.max_new == 0 || self.engine.draft_cap == 0 {
            return Err(ConfigError::Invalid("engine.max_new and engine.draft_cap must be positive".into()));
        }
        if self.distill.epochs == 0 || self.distill.prompt_len == 0 || self.predictor.prompt_len == 0 {
            return Err(ConfigError::Invalid(
                "distill.epochs and prompt lengths must be positive".into(),
            ));
        }
        if let Some(t) = self.engine.stop_tokens.iter().find(|&&t| t as usize >= self.model.vocab_size) {
            return Err(ConfigError::Invalid(format!("stop token {t} outside the vocabulary")));
        }
        for (name, v) in [("timing.t_draft", self.timing.t_draft), ("timing.t_target", self.timing.t_target)] {
            if v.is_some_and(|v| !(v > 0.0)) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
