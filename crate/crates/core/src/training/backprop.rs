//! Full-sequence forward and backward passes in f64.
//!
//! Mirrors the inference architecture exactly: embeddings, pre-norm blocks
//! (RMS-norm, causal multi-head attention, SiLU feed-forward), a final
//! RMS-norm and an output head, with the draft path branching after the
//! shared layers.

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::nano::{LayerWeights, NanoConfig, NanoWeights};
use crate::tensor::Tensor;

fn mat(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.rows(), t.cols()), t.data().iter().map(|&v| v as f64).collect())
        .expect("2-D tensor")
}

fn vec1(t: &Tensor) -> Array1<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.iter().map(|&v| v as f32).collect()).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerP {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ffn_norm: Array1<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl LayerP {
    fn from_weights(l: &LayerWeights) -> Self {
        Self {
            attn_norm: vec1(&l.attn_norm),
            wq: mat(&l.wq),
            wk: mat(&l.wk),
            wv: mat(&l.wv),
            wo: mat(&l.wo),
            ffn_norm: vec1(&l.ffn_norm),
            w1: mat(&l.w1),
            w2: mat(&l.w2),
        }
    }

    fn to_weights(&self) -> LayerWeights {
        let t2 = |a: &Array2<f64>| tensor(a.shape(), a.as_slice().expect("contiguous"));
        let t1 = |a: &Array1<f64>| tensor(a.shape(), a.as_slice().expect("contiguous"));
        LayerWeights {
            attn_norm: t1(&self.attn_norm),
            wq: t2(&self.wq),
            wk: t2(&self.wk),
            wv: t2(&self.wv),
            wo: t2(&self.wo),
            ffn_norm: t1(&self.ffn_norm),
            w1: t2(&self.w1),
            w2: t2(&self.w2),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            attn_norm: Array1::zeros(self.attn_norm.raw_dim()),
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
            ffn_norm: Array1::zeros(self.ffn_norm.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
        }
    }

    fn slices(&self) -> [&[f64]; 8] {
        [
            self.attn_norm.as_slice().unwrap(),
            self.wq.as_slice().unwrap(),
            self.wk.as_slice().unwrap(),
            self.wv.as_slice().unwrap(),
            self.wo.as_slice().unwrap(),
            self.ffn_norm.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.attn_norm.as_slice_mut().unwrap(),
            self.wq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.ffn_norm.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
        ]
    }
}

/// f64 copy of all parameters; slice order matches [`NanoWeights::named`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerP>,
    pub final_norm: Array1<f64>,
    pub head: Array2<f64>,
    pub exit_layers: Vec<LayerP>,
    pub exit_norm: Array1<f64>,
    pub exit_head: Array2<f64>,
}

impl Params {
    pub fn from_weights(w: &NanoWeights) -> Self {
        Self {
            tok_emb: mat(&w.tok_emb),
            pos_emb: mat(&w.pos_emb),
            layers: w.layers.iter().map(LayerP::from_weights).collect(),
            final_norm: vec1(&w.final_norm),
            head: mat(&w.head),
            exit_layers: w.exit_layers.iter().map(LayerP::from_weights).collect(),
            exit_norm: vec1(&w.exit_norm),
            exit_head: mat(&w.exit_head),
        }
    }

    pub fn to_weights(&self) -> NanoWeights {
        let t2 = |a: &Array2<f64>| tensor(a.shape(), a.as_slice().expect("contiguous"));
        let t1 = |a: &Array1<f64>| tensor(a.shape(), a.as_slice().expect("contiguous"));
        NanoWeights {
            tok_emb: t2(&self.tok_emb),
            pos_emb: t2(&self.pos_emb),
            layers: self.layers.iter().map(LayerP::to_weights).collect(),
            final_norm: t1(&self.final_norm),
            head: t2(&self.head),
            exit_layers: self.exit_layers.iter().map(LayerP::to_weights).collect(),
            exit_norm: t1(&self.exit_norm),
            exit_head: t2(&self.exit_head),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            layers: self.layers.iter().map(LayerP::zeros_like).collect(),
            final_norm: Array1::zeros(self.final_norm.raw_dim()),
            head: Array2::zeros(self.head.raw_dim()),
            exit_layers: self.exit_layers.iter().map(LayerP::zeros_like).collect(),
            exit_norm: Array1::zeros(self.exit_norm.raw_dim()),
            exit_head: Array2::zeros(self.exit_head.raw_dim()),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.tok_emb.as_slice().unwrap(), self.pos_emb.as_slice().unwrap()];
        for l in &self.layers {
            out.extend(l.slices());
        }
        out.push(self.final_norm.as_slice().unwrap());
        out.push(self.head.as_slice().unwrap());
        for l in &self.exit_layers {
            out.extend(l.slices());
        }
        out.push(self.exit_norm.as_slice().unwrap());
        out.push(self.exit_head.as_slice().unwrap());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend(l.slices_mut());
        }
        out.push(self.final_norm.as_slice_mut().unwrap());
        out.push(self.head.as_slice_mut().unwrap());
        for l in &mut self.exit_layers {
            out.extend(l.slices_mut());
        }
        out.push(self.exit_norm.as_slice_mut().unwrap());
        out.push(self.exit_head.as_slice_mut().unwrap());
        out
    }

    /// `self += other`, slice by slice in order.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Which output head the loss is taken through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Path {
    Target,
    Exit,
}

fn rms_fwd(x: &Array2<f64>, g: &Array1<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv = x.map_axis(Axis(1), |r| 1.0 / (r.dot(&r) / d + eps).sqrt());
    let y = x * &inv.view().insert_axis(Axis(1)) * g;
    (y, inv)
}

fn rms_bwd(
    x: &Array2<f64>,
    g: &Array1<f64>,
    inv: &Array1<f64>,
    dy: &Array2<f64>,
    dg: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let inv_col = inv.view().insert_axis(Axis(1));
    let xn = x * &inv_col;
    *dg += &(dy * &xn).sum_axis(Axis(0));
    let dxn = dy * g;
    let proj = (&dxn * &xn).sum_axis(Axis(1)) / d;
    (&dxn - &(&xn * &proj.insert_axis(Axis(1)))) * &inv_col
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

struct LayerCache {
    x: Array2<f64>,
    inv1: Array1<f64>,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    x2: Array2<f64>,
    inv2: Array1<f64>,
    h2: Array2<f64>,
    u: Array2<f64>,
    f: Array2<f64>,
}

fn layer_fwd(l: &LayerP, x: Array2<f64>, n_heads: usize, eps: f64) -> (Array2<f64>, LayerCache) {
    let (t, d) = x.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (h1, inv1) = rms_fwd(&x, &l.attn_norm, eps);
    let q = h1.dot(&l.wq);
    let k = h1.dot(&l.wk);
    let v = h1.dot(&l.wv);
    let mut att = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for (i, mut row) in sc.axis_iter_mut(Axis(0)).enumerate() {
            let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (j, e) in row.iter_mut().enumerate() {
                if j <= i {
                    *e = (*e - max).exp();
                    sum += *e;
                } else {
                    *e = 0.0;
                }
            }
            row.mapv_inplace(|e| e / sum);
        }
        att.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let x2 = &x + &att.dot(&l.wo);
    let (h2, inv2) = rms_fwd(&x2, &l.ffn_norm, eps);
    let u = h2.dot(&l.w1);
    let f = u.mapv(silu);
    let out = &x2 + &f.dot(&l.w2);
    let cache = LayerCache {
        x,
        inv1,
        h1,
        q,
        k,
        v,
        probs,
        att,
        x2,
        inv2,
        h2,
        u,
        f,
    };
    (out, cache)
}

fn layer_bwd(l: &LayerP, c: &LayerCache, dout: Array2<f64>, g: &mut LayerP, n_heads: usize) -> Array2<f64> {
    let d = c.x.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    g.w2 += &c.f.t().dot(&dout);
    let df = dout.dot(&l.w2.t());
    let mut du = df;
    Zip::from(&mut du).and(&c.u).for_each(|a, &u| *a *= silu_grad(u));
    g.w1 += &c.h2.t().dot(&du);
    let dh2 = du.dot(&l.w1.t());
    let dx2 = rms_bwd(&c.x2, &l.ffn_norm, &c.inv2, &dh2, &mut g.ffn_norm) + &dout;

    g.wo += &c.att.t().dot(&dx2);
    let datt = dx2.dot(&l.wo.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, p) in c.probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let da = datt.slice(cols);
        let dp = da.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&da));
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (&dp - &row_dot) * p * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.wq += &c.h1.t().dot(&dq);
    g.wk += &c.h1.t().dot(&dk);
    g.wv += &c.h1.t().dot(&dv);
    let dh1 = dq.dot(&l.wq.t()) + dk.dot(&l.wk.t()) + dv.dot(&l.wv.t());
    rms_bwd(&c.x, &l.attn_norm, &c.inv1, &dh1, &mut g.attn_norm) + &dx2
}

fn embed(p: &Params, tokens: &[usize]) -> Array2<f64> {
    let d = p.tok_emb.ncols();
    let mut x = Array2::zeros((tokens.len(), d));
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &p.tok_emb.row(tok) + &p.pos_emb.row(i);
        x.row_mut(i).assign(&row);
    }
    x
}

/// Summed cross-entropy of predicting `targets` from `logits`, and the
/// gradient `softmax − onehot` with respect to the logits.
fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.axis_iter_mut(Axis(0)).zip(targets) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        loss -= row[y].ln();
        row[y] -= 1.0;
    }
    (loss, grad)
}

/// Summed next-token loss over `tokens[1..]` given `tokens[..n-1]`, with
/// gradients of that sum accumulated into `grads` when given. The target
/// path differentiates every target parameter; the exit path only the exit
/// block, exit norm and exit head.
pub(crate) fn sequence_loss(
    p: &Params,
    cfg: &NanoConfig,
    tokens: &[usize],
    path: Path,
    grads: Option<&mut Params>,
) -> f64 {
    let n = tokens.len() - 1;
    let inputs = &tokens[..n];
    let targets = &tokens[1..];
    let eps = cfg.norm_eps as f64;
    let heads = cfg.n_heads;
    let want = grads.is_some();

    let mut x = embed(p, inputs);
    let (stack, norm, head) = match path {
        Path::Target => (&p.layers[..], &p.final_norm, &p.head),
        Path::Exit => {
            for l in &p.layers[..cfg.exit_after] {
                x = layer_fwd(l, x, heads, eps).0;
            }
            (&p.exit_layers[..], &p.exit_norm, &p.exit_head)
        }
    };
    let mut caches = Vec::with_capacity(stack.len());
    for l in stack {
        let (y, c) = layer_fwd(l, x, heads, eps);
        if want {
            caches.push(c);
        }
        x = y;
    }
    let (hn, inv) = rms_fwd(&x, norm, eps);
    let logits = hn.dot(head);
    let (loss, dlogits) = cross_entropy(&logits, targets);
    let Some(g) = grads else {
        return loss;
    };

    let (g_stack, g_norm, g_head) = match path {
        Path::Target => (&mut g.layers, &mut g.final_norm, &mut g.head),
        Path::Exit => (&mut g.exit_layers, &mut g.exit_norm, &mut g.exit_head),
    };
    *g_head += &hn.t().dot(&dlogits);
    let dhn = dlogits.dot(&head.t());
    let mut dx = rms_bwd(&x, norm, &inv, &dhn, g_norm);
    for ((l, c), gl) in stack.iter().zip(&caches).zip(g_stack.iter_mut()).rev() {
        dx = layer_bwd(l, c, dx, gl, heads);
    }
    if path == Path::Target {
        for (i, &tok) in inputs.iter().enumerate() {
            let row = dx.row(i);
            let mut te = g.tok_emb.row_mut(tok);
            te += &row;
            let mut pe = g.pos_emb.row_mut(i);
            pe += &row;
        }
    }
    loss
}
