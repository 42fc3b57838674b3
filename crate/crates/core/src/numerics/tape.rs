//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Every op appends one node whose inputs precede it, so the node order is
//! a topological order and `backward` is a single reverse sweep. Leaves can
//! borrow their tensor (model weights) or own it (masks, test inputs).

use std::borrow::Cow;
use std::ops::Range;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One supervised position for [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeTarget {
    pub row: usize,
    pub token: usize,
    pub weight: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// (mean, 1/std) per row.
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        /// Row-stochastic causal weights, one `len x len` block per (segment, head).
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<CeTarget>,
        /// Softmax of each target's row, aligned with `targets`.
        probs: Vec<Vec<f64>>,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let inner = C * (x + K * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("softmax_rows input")?;
    let mut out = logits.clone();
    let cols = out.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Natural-log softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn slot<'b>(adj: &'b mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> &'b mut Vec<f64> {
    let len = nodes[v.0].value.len();
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrowed leaf excluded from differentiation.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// `a x b`, or `a x b^T` when `b_trans` is set.
    pub fn matmul_ext(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = (at.rows(), at.cols());
        let (bk, n) = if b_trans {
            (bt.cols(), bt.rows())
        } else {
            (bt.rows(), bt.cols())
        };
        if at.shape().len() != 2 || bt.shape().len() != 2 || k != bk {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, at.data(), false, bt.data(), b_trans, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_owned(t, Op::MatMul { a, b, b_trans }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `a x b^T`; the natural form for `[out x in]` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_owned(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let at = self.value(a);
        let data = at.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(at.shape().to_vec(), data).expect("same shape");
        self.push_owned(t, Op::Scale(a, c), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let data = at.data().iter().map(|&x| gelu_parts(x).0).collect();
        let t = Tensor::new(at.shape().to_vec(), data).expect("same shape");
        self.push_owned(t, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = softmax_rows(self.value(a))?;
        Ok(self.push_owned(t, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        if self.value(gain).len() != d {
            return Err(self.shape_err("layer_norm gain", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.shape_err("layer_norm bias", x, bias));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; xt.len()];
        let mut stats = Vec::with_capacity(xt.rows());
        for (r, row) in xt.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push_owned(t, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias]))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let d = tt.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(Error::Shape {
                op: "embedding",
                left: tt.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_owned(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head causal self-attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `[n x d]`; each segment is a contiguous block of rows
    /// forming one sequence, and rows attend only to earlier-or-equal rows of
    /// their own segment.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Range<usize>]) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.shape() != kt.shape() || qt.shape() != vt.shape() || qt.shape().len() != 2 {
            return Err(self.shape_err("causal_attention", q, k));
        }
        let (n, d) = (qt.rows(), qt.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{heads} heads do not divide width {d}")));
        }
        if segments.iter().any(|s| s.end > n || s.start > s.end) {
            return Err(Error::contract("attention segment outside the row range"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let off = h * dh;
                let base = probs.len();
                probs.resize(base + len * len, 0.0);
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    let p = &mut probs[base + i * len..base + (i + 1) * len];
                    for j in 0..=i {
                        p[j] = dot(qi, &kd[(seg.start + j) * d + off..][..dh]) * scale;
                    }
                    softmax_in_place(&mut p[..=i]);
                    let oi = &mut out[(seg.start + i) * d + off..][..dh];
                    for j in 0..=i {
                        axpy(p[j], &vd[(seg.start + j) * d + off..][..dh], oi);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push_owned(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Weighted sum of `-ln softmax(logits[row])[token]` over the targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[CeTarget]) -> Result<Var> {
        let lt = self.value(logits);
        let (rows, vocab) = (lt.rows(), lt.cols());
        let mut probs = Vec::with_capacity(targets.len());
        let mut loss = 0.0;
        for t in targets {
            if t.row >= rows || t.token >= vocab {
                return Err(Error::contract(format!(
                    "cross-entropy target ({}, {}) outside logits {:?}",
                    t.row,
                    t.token,
                    lt.shape()
                )));
            }
            let logp = log_softmax(lt.row(t.row));
            loss -= t.weight * logp[t.token];
            probs.push(logp.iter().map(|v| v.exp()).collect());
        }
        let out = Tensor::scalar(loss);
        out.check_finite("cross-entropy")?;
        Ok(self.push_owned(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    ///
    /// Intermediate adjoints are rebuilt on each call, so calling twice
    /// without [`Tape::zero_grads`] doubles the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => axpy(1.0, &g, acc),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_trans } => {
                let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (at.rows(), at.cols());
                let n = nodes[idx].value.cols();
                if wants(*a) {
                    // dA = G op(B)^T
                    let da = slot(adj, nodes, *a);
                    gemm(m, n, k, g, false, bt.data(), !*b_trans, da, true);
                }
                if wants(*b) {
                    let db = slot(adj, nodes, *b);
                    if *b_trans {
                        // B is [n x k]: dB = G^T A
                        gemm(n, m, k, g, true, at.data(), false, db, true);
                    } else {
                        // dB = A^T G
                        gemm(k, m, n, at.data(), true, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(1.0, g, slot(adj, nodes, v));
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = nodes[b.0].value.data();
                    let da = slot(adj, nodes, *a);
                    for ((d, gi), o) in da.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if wants(*b) {
                    let other = nodes[a.0].value.data();
                    let db = slot(adj, nodes, *b);
                    for ((d, gi), o) in db.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    axpy(*c, g, slot(adj, nodes, *a));
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = nodes[a.0].value.data();
                    let da = slot(adj, nodes, *a);
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        *d += gi * gelu_parts(*xi).1;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let y = &nodes[idx].value;
                    let cols = y.cols();
                    let da = slot(adj, nodes, *a);
                    for ((yr, gr), dr) in y.data().chunks(cols).zip(g.chunks(cols)).zip(da.chunks_mut(cols)) {
                        let t = dot(yr, gr);
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - t);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xt = &nodes[x.0].value;
                let d = xt.cols();
                let gv = nodes[gain.0].value.data();
                let xhat = |r: usize, j: usize| (xt.data()[r * d + j] - stats[r].0) * stats[r].1;
                if wants(*x) {
                    let dx = slot(adj, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat(r, j);
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd * (dxhat[j] - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                }
                if wants(*gain) {
                    let dg = slot(adj, nodes, *gain);
                    for r in 0..stats.len() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                }
                if wants(*bias) {
                    let db = slot(adj, nodes, *bias);
                    for gr in g.chunks(d) {
                        axpy(1.0, gr, db);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = nodes[table.0].value.cols();
                    let dt = slot(adj, nodes, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let d = nodes[q.0].value.cols();
                let n = nodes[q.0].value.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut base = 0;
                let mut dp = Vec::new();
                for seg in segments {
                    let len = seg.len();
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..len {
                            let ri = (seg.start + i) * d + off;
                            let go = &g[ri..ri + dh];
                            let p = &probs[base + i * len..base + i * len + i + 1];
                            dp.clear();
                            for (j, &pij) in p.iter().enumerate() {
                                let rj = (seg.start + j) * d + off;
                                dp.push(dot(go, &vd[rj..rj + dh]));
                                axpy(pij, go, &mut dv[rj..rj + dh]);
                            }
                            let t = dot(p, &dp);
                            for (j, &pij) in p.iter().enumerate() {
                                let ds = pij * (dp[j] - t) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = (seg.start + j) * d + off;
                                axpy(ds, &kd[rj..rj + dh], &mut dq[ri..ri + dh]);
                                axpy(ds, &qd[ri..ri + dh], &mut dk[rj..rj + dh]);
                            }
                        }
                        base += len * len;
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        axpy(1.0, &grad, slot(adj, nodes, var));
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let vocab = nodes[logits.0].value.cols();
                    let dl = slot(adj, nodes, *logits);
                    for (t, p) in targets.iter().zip(probs) {
                        let w = g[0] * t.weight;
                        let row = &mut dl[t.row * vocab..(t.row + 1) * vocab];
                        axpy(w, p, row);
                        row[t.token] -= w;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for d in slot(adj, nodes, *a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}
