use std::path::Path;

use crate::checkpoint::{check_kind, Container, KIND_PREDICTOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of distinct position matrices; later positions share the last.
pub const MAX_POSITIONS: usize = 10;

const THETA_FLOOR: f64 = 1e-12;

/// Acceptance predictor: per-position maps `W^i` (d×d) applied to the target
/// state, then a two-logit map `Wp` (2×2d) over `[W^i·h_T ; h_D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorWeights {
    pub d_model: usize,
    /// `w_pos[i - 1]` is `W^i`, row-major `[d, d]`.
    pub w_pos: Vec<Tensor>,
    /// `[2, 2d]`.
    pub w_p: Tensor,
}

impl PredictorWeights {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            d_model,
            w_pos: vec![Tensor::zeros(&[d_model, d_model]); MAX_POSITIONS],
            w_p: Tensor::zeros(&[2, 2 * d_model]),
        }
    }

    /// `W^i = I`, `Wp = 0`: the starting point for training.
    pub fn identity(d_model: usize) -> Self {
        let mut p = Self::zeros(d_model);
        for w in &mut p.w_pos {
            for k in 0..d_model {
                w.data_mut()[k * d_model + k] = 1.0;
            }
        }
        p
    }

    /// Index into `w_pos` for drafted position `i ≥ 1`.
    pub fn slot(i: usize) -> usize {
        i.clamp(1, MAX_POSITIONS) - 1
    }

    /// Feature vector `[W^i·h_T ; h_D]`.
    pub fn features(&self, target_hidden: &[f32], draft_hidden: &[f32], i: usize) -> Result<Vec<f64>> {
        let d = self.d_model;
        if target_hidden.len() != d || draft_hidden.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "predictor expects hidden size {d}, got target {} and draft {}",
                target_hidden.len(),
                draft_hidden.len()
            )));
        }
        if i < 1 {
            return Err(Error::InvalidState("predictor position must be >= 1".into()));
        }
        let w = &self.w_pos[Self::slot(i)];
        let mut out = Vec::with_capacity(2 * d);
        for r in 0..d {
            let row = w.row(r);
            out.push(row.iter().zip(target_hidden).map(|(&a, &b)| a as f64 * b as f64).sum());
        }
        out.extend(draft_hidden.iter().map(|&v| v as f64));
        Ok(out)
    }

    /// Score `logit_1 − logit_0` for a feature vector.
    pub fn score(&self, features: &[f64]) -> f64 {
        let (l0, l1) = (self.w_p.row(0), self.w_p.row(1));
        features
            .iter()
            .enumerate()
            .map(|(k, &f)| (l1[k] as f64 - l0[k] as f64) * f)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.w_p.is_finite() && self.w_pos.iter().all(Tensor::is_finite)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND_PREDICTOR, serde_json::json!({ "d_model": self.d_model }));
        c.push("Wp", self.w_p.clone());
        for (i, w) in self.w_pos.iter().enumerate() {
            c.push(format!("Wi.{}", i + 1), w.clone());
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        check_kind(&c, KIND_PREDICTOR)?;
        let d_model = c
            .meta
            .get("d_model")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptCheckpoint("predictor header lacks d_model".into()))?
            as usize;
        let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor> {
            let t = c.take(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let w_p = take("Wp".into(), vec![2, 2 * d_model])?;
        let w_pos = (1..=MAX_POSITIONS)
            .map(|i| take(format!("Wi.{i}"), vec![d_model, d_model]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { d_model, w_pos, w_p })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Predicted acceptance probability θ_M for drafted position `i`, kept
/// strictly inside (0, 1).
pub fn cali_predict(
    pred: &PredictorWeights,
    target_hidden: &[f32],
    draft_hidden: &[f32],
    i: usize,
) -> Result<f64> {
    let f = pred.features(target_hidden, draft_hidden, i)?;
    Ok(sigmoid(pred.score(&f)).clamp(THETA_FLOOR, 1.0 - THETA_FLOOR))
}
