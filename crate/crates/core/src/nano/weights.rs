use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nano::NanoConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Output-head init scale; keeps initial predictions close to uniform.
const HEAD_INIT_STD: f32 = 0.02;

/// One pre-norm transformer block. Matrices are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

const LAYER_FIELDS: [&str; 8] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2",
];

impl LayerWeights {
    fn zeros(cfg: &NanoConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attn_norm: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ffn_norm: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, cfg.d_ff]),
            w2: Tensor::zeros(&[cfg.d_ff, d]),
        }
    }

    fn random(cfg: &NanoConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let std_in = (1.0 / d as f32).sqrt();
        let std_res = std_in / (2.0 * cfg.n_layers as f32).sqrt();
        let std_ff = (1.0 / cfg.d_ff as f32).sqrt() / (2.0 * cfg.n_layers as f32).sqrt();
        Self {
            attn_norm: Tensor::filled(&[d], 1.0),
            wq: normal(&[d, d], std_in, rng),
            wk: normal(&[d, d], std_in, rng),
            wv: normal(&[d, d], std_in, rng),
            wo: normal(&[d, d], std_res, rng),
            ffn_norm: Tensor::filled(&[d], 1.0),
            w1: normal(&[d, cfg.d_ff], std_in, rng),
            w2: normal(&[cfg.d_ff, d], std_ff, rng),
        }
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w1,
            &self.w2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

fn normal(shape: &[usize], std: f32, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Which parameters a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Shared,
    Tail,
    TargetHead,
    Exit,
}

/// Target transformer plus the early-exit draft block.
#[derive(Debug, Clone, PartialEq)]
pub struct NanoWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
    pub exit_layers: Vec<LayerWeights>,
    pub exit_norm: Tensor,
    pub exit_head: Tensor,
}

impl NanoWeights {
    pub fn zeros(cfg: &NanoConfig) -> Self {
        let d = cfg.d_model;
        Self {
            tok_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(&[cfg.max_seq_len, d]),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            final_norm: Tensor::zeros(&[d]),
            head: Tensor::zeros(&[d, cfg.vocab_size]),
            exit_layers: (0..cfg.exit_depth).map(|_| LayerWeights::zeros(cfg)).collect(),
            exit_norm: Tensor::zeros(&[d]),
            exit_head: Tensor::zeros(&[d, cfg.vocab_size]),
        }
    }

    /// Random initialization; the exit block is initialized from the
    /// target tail.
    pub fn random(cfg: &NanoConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut w = Self {
            tok_emb: normal(&[cfg.vocab_size, d], 1.0, rng),
            pos_emb: normal(&[cfg.max_seq_len, d], 0.1, rng),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights::random(cfg, rng))
                .collect(),
            final_norm: Tensor::filled(&[d], 1.0),
            head: normal(&[d, cfg.vocab_size], HEAD_INIT_STD, rng),
            exit_layers: Vec::new(),
            exit_norm: Tensor::filled(&[d], 1.0),
            exit_head: Tensor::zeros(&[d, cfg.vocab_size]),
        };
        w.exit_layers = (0..cfg.exit_depth).map(|_| LayerWeights::zeros(cfg)).collect();
        w.init_exit_from_target(cfg)?;
        Ok(w)
    }

    /// Copy the last `exit_depth` target layers, the final norm and the
    /// target head into the exit block.
    pub fn init_exit_from_target(&mut self, cfg: &NanoConfig) -> Result<()> {
        self.check_shapes(cfg)?;
        let start = cfg.n_layers - cfg.exit_depth;
        self.exit_layers = self.layers[start..].to_vec();
        self.exit_norm = self.final_norm.clone();
        self.exit_head = self.head.clone();
        Ok(())
    }

    /// Ordered `(name, tensor, group)` listing; this order is the checkpoint
    /// tensor directory order.
    pub fn named(&self, cfg: &NanoConfig) -> Vec<(String, &Tensor, ParamGroup)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb, ParamGroup::Embedding),
            ("pos_emb".to_string(), &self.pos_emb, ParamGroup::Embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let group = if i < cfg.exit_after {
                ParamGroup::Shared
            } else {
                ParamGroup::Tail
            };
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{field}"), t, group));
            }
        }
        out.push(("final_norm".into(), &self.final_norm, ParamGroup::TargetHead));
        out.push(("head".into(), &self.head, ParamGroup::TargetHead));
        for (i, layer) in self.exit_layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("exit.{i}.{field}"), t, ParamGroup::Exit));
            }
        }
        out.push(("exit_norm".into(), &self.exit_norm, ParamGroup::Exit));
        out.push(("exit_head".into(), &self.exit_head, ParamGroup::Exit));
        out
    }

    /// Mutable tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        for layer in &mut self.exit_layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.exit_norm);
        out.push(&mut self.exit_head);
        out
    }

    /// Expected shapes for `cfg`, in directory order.
    pub fn expected_shapes(cfg: &NanoConfig) -> Vec<(String, Vec<usize>)> {
        let zero = NanoWeights::zeros(cfg);
        zero.named(cfg)
            .into_iter()
            .map(|(n, t, _)| (n, t.shape().to_vec()))
            .collect()
    }

    pub fn check_shapes(&self, cfg: &NanoConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::ShapeMismatch {
                name: "layers".into(),
                expected: vec![cfg.n_layers],
                found: vec![self.layers.len()],
            });
        }
        if self.exit_layers.len() != cfg.exit_depth {
            return Err(Error::ShapeMismatch {
                name: "exit".into(),
                expected: vec![cfg.exit_depth],
                found: vec![self.exit_layers.len()],
            });
        }
        for ((name, t, _), (_, shape)) in self.named(cfg).into_iter().zip(Self::expected_shapes(cfg)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self, cfg: &NanoConfig) -> bool {
        self.named(cfg).iter().all(|(_, t, _)| t.is_finite())
    }
}
