//! Inference kernels with a fixed f32 accumulation order.
//!
//! Every reduction runs sequentially in index order and no kernel fuses
//! multiply-add, so a row's result does not depend on how many rows are
//! processed together. Batch and single-token calls agree bitwise.

use crate::nano::weights::LayerWeights;
use crate::tensor::Tensor;

/// `out = x / sqrt(mean(x²) + eps) ⊙ gain`.
pub(crate) fn rmsnorm(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

pub(crate) fn rmsnorm_rows(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let d = gain.len();
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        rmsnorm(xr, gain, eps, or);
    }
}

/// `out[r] = x[r] · w` for every row; `w` is `[in, out]`.
pub(crate) fn linear(x: &[f32], w: &Tensor, out: &mut Vec<f32>) {
    let (n_in, n_out) = (w.rows(), w.cols());
    let rows = x.len() / n_in;
    out.clear();
    out.resize(rows * n_out, 0.0);
    for i in 0..n_in {
        let w_row = w.row(i);
        for r in 0..rows {
            let a = x[r * n_in + i];
            let y = &mut out[r * n_out..(r + 1) * n_out];
            for (yj, &wj) in y.iter_mut().zip(w_row) {
                *yj += a * wj;
            }
        }
    }
}

pub(crate) fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// Key/value history of one layer, `len × d_model` each.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Run `rows` positions starting at absolute position `start` through
/// `layers`, appending their keys/values. Each `kv` must hold exactly
/// `start` positions.
pub(crate) fn run_layers(
    layers: &[LayerWeights],
    kv: &mut [LayerKv],
    start: usize,
    x: &mut [f32],
    n_heads: usize,
    eps: f32,
) {
    let d = layers.first().map(|l| l.attn_norm.len()).unwrap_or(0);
    if d == 0 {
        return;
    }
    let rows = x.len() / d;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut h = vec![0.0f32; x.len()];
    let (mut q, mut k, mut v, mut o) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut att = vec![0.0f32; x.len()];
    let mut f = Vec::new();
    let mut scores = Vec::with_capacity(start + rows);
    for (layer, cache) in layers.iter().zip(kv.iter_mut()) {
        debug_assert_eq!(cache.k.len(), start * d);
        rmsnorm_rows(x, layer.attn_norm.data(), eps, &mut h);
        linear(&h, &layer.wq, &mut q);
        linear(&h, &layer.wk, &mut k);
        linear(&h, &layer.wv, &mut v);
        cache.k.extend_from_slice(&k);
        cache.v.extend_from_slice(&v);
        for r in 0..rows {
            let visible = start + r + 1;
            for head in 0..n_heads {
                let off = head * hd;
                let qh = &q[r * d + off..r * d + off + hd];
                scores.clear();
                let mut max = f32::NEG_INFINITY;
                for t in 0..visible {
                    let kh = &cache.k[t * d + off..t * d + off + hd];
                    let mut s = 0.0f32;
                    for (&a, &b) in qh.iter().zip(kh) {
                        s += a * b;
                    }
                    s *= scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut sum = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[r * d + off..r * d + off + hd];
                out.fill(0.0);
                for (t, &e) in scores.iter().enumerate() {
                    let w = e / sum;
                    let vh = &cache.v[t * d + off..t * d + off + hd];
                    for (oj, &vj) in out.iter_mut().zip(vh) {
                        *oj += w * vj;
                    }
                }
            }
        }
        linear(&att, &layer.wo, &mut o);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        rmsnorm_rows(x, layer.ffn_norm.data(), eps, &mut h);
        linear(&h, &layer.w1, &mut f);
        for fv in f.iter_mut() {
            *fv = silu(*fv);
        }
        linear(&f, &layer.w2, &mut o);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_rows_independent() {
        let w = Tensor::from_vec(&[3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let x = [1.0f32, 2.0, 3.0, -1.0, 0.5, 0.25];
        let mut both = Vec::new();
        linear(&x, &w, &mut both);
        let mut first = Vec::new();
        linear(&x[..3], &w, &mut first);
        let mut second = Vec::new();
        linear(&x[3..], &w, &mut second);
        assert_eq!(&both[..2], first.as_slice());
        assert_eq!(&both[2..], second.as_slice());
        assert!((first[0] - (0.1 + 0.6 - 1.5)).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_unit_rms() {
        let x = [3.0f32, -4.0];
        let mut out = [0.0f32; 2];
        rmsnorm(&x, &[1.0, 1.0], 0.0, &mut out);
        let rms = ((out[0] * out[0] + out[1] * out[1]) / 2.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.731_058_6).abs() < 1e-6);
    }
}
