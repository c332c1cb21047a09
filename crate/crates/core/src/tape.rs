//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes whose
//! inputs all have `requires_grad == false` are stored as constants and carry
//! no backward rule, so a forward pass over frozen tensors records nothing.
//! Gradients land on leaf tensors and accumulate across `backward` calls.

use crate::error::{PearError, Result};
use crate::tensor::{as_matrix, matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu {
        x: Var,
        slope: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    MeanPool {
        x: Var,
        group: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximate GELU and its derivative, using `0.5·(1 + tanh u) = σ(2u)`.
fn gelu_with_slope(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    let value = x * s;
    let slope = s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    (value, slope)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Constant))
            .count()
    }

    /// Places a tensor on the tape. Its `requires_grad` flag decides whether
    /// it receives gradients.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad()
    }

    fn record(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let mut value = Tensor::new(shape, data).expect("op produced consistent shape");
        let tracked = inputs.iter().any(|&v| self.needs_grad(v));
        value.set_requires_grad(tracked);
        self.push(value, if tracked { op } else { Op::Constant })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a), "matmul")?;
        let (k2, n) = as_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(PearError::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.record(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a + b`, where `b` is either the same shape as `a` or is tiled over
    /// the leading (batch) rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_compatible(ta, tb) {
            return Err(PearError::shape("add", ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % bd.len()])
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.record(&shape, out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(PearError::shape("mul", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.record(&shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.record(&shape, out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        self.record(&shape, out, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (out, slope) = ta.data().iter().map(|&x| gelu_with_slope(x)).unzip();
        let shape = ta.shape().to_vec();
        self.record(&shape, out, Op::Gelu { x: a, slope }, &[a])
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(PearError::InvalidConfig(format!("layer_norm eps {eps}")));
        }
        let tx = self.value(x);
        let cols = tx.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(PearError::shape(
                    "layer_norm",
                    tx.shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = tx.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.record(&shape, out, op, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = ta.shape().to_vec();
        self.record(&shape, out, Op::SoftmaxRows(a), &[a])
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (batch, classes) = as_matrix(tl, "cross_entropy")?;
        if labels.len() != batch {
            return Err(PearError::shape("cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(PearError::LabelOutOfRange { label, classes });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            softmax_in_place(row);
            loss -= row[label].ln();
        }
        loss /= batch as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.record(&[1], vec![loss], op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(&[1], vec![s], Op::Sum(a), &[a])
    }

    /// Averages consecutive groups of `group` rows: `[B·group, D] → [B, D]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix(tx, "mean_pool")?;
        if group == 0 || rows % group != 0 {
            return Err(PearError::shape("mean_pool", tx.shape(), &[group]));
        }
        let batch = rows / group;
        let mut out = vec![0.0; batch * cols];
        for (r, row) in tx.data().chunks(cols).enumerate() {
            let o = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (o, v) in o.iter_mut().zip(row) {
                *o += v / group as f64;
            }
        }
        Ok(self.record(&[batch, cols], out, Op::MeanPool { x, group }, &[x]))
    }

    /// Bidirectional multi-head scaled dot-product attention over
    /// `[B·seq, D]` query/key/value matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, dim) = as_matrix(self.value(q), "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, dim] {
                return Err(PearError::shape(
                    "attention",
                    &[rows, dim],
                    self.value(other).shape(),
                ));
            }
        }
        if seq == 0 || heads == 0 || rows % seq != 0 || dim % heads != 0 {
            return Err(PearError::shape("attention", &[rows, dim], &[seq, heads]));
        }
        let batch = rows / seq;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        let (mut qh, mut kh, mut vh) = (vec![0.0; seq * hd], vec![0.0; seq * hd], vec![0.0; seq * hd]);
        let mut oh = vec![0.0; seq * hd];
        for b in 0..batch {
            for h in 0..heads {
                let block = HeadBlock { b, h, seq, dim, hd };
                block.gather(qd, &mut qh);
                block.gather(kd, &mut kh);
                block.gather(vd, &mut vh);
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                matmul_nt(&qh, &kh, p, seq, hd, seq);
                for row in p.chunks_mut(seq) {
                    row.iter_mut().for_each(|v| *v *= scale);
                    softmax_in_place(row);
                }
                oh.iter_mut().for_each(|v| *v = 0.0);
                matmul_nn(p, &vh, &mut oh, seq, seq, hd);
                block.scatter_add(&oh, &mut out);
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            probs,
        };
        Ok(self.record(&[rows, dim], out, op, &[q, k, v]))
    }

    /// Propagates gradients from a scalar `loss` back to every reachable
    /// leaf with `requires_grad`, adding into any gradient already present.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(PearError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(dy);
                continue;
            }
            for (input, delta) in self.local_grads(idx, &dy) {
                if !self.needs_grad(input) {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }

        for (idx, g) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.value.requires_grad() {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_grads(&self, idx: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let want = |v: Var| self.needs_grad(v);
        let mut grads = Vec::new();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(dy, tb.data(), &mut da, m, n, k);
                    grads.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(ta.data(), dy, &mut db, k, m, n);
                    grads.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    grads.push((*a, dy.to_vec()));
                }
                if want(*b) {
                    let len = self.value(*b).numel();
                    let mut db = vec![0.0; len];
                    for (i, d) in dy.iter().enumerate() {
                        db[i % len] += d;
                    }
                    grads.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    grads.push((*a, dy.iter().zip(tb.data()).map(|(d, y)| d * y).collect()));
                }
                if want(*b) {
                    grads.push((*b, dy.iter().zip(ta.data()).map(|(d, x)| d * x).collect()));
                }
            }
            Op::Scale(a, c) => grads.push((*a, dy.iter().map(|d| d * c).collect())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g = dy
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                grads.push((*a, g));
            }
            Op::Gelu { x, slope } => {
                let g = dy.iter().zip(slope).map(|(d, s)| d * s).collect();
                grads.push((*x, g));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*x).cols();
                let g = self.value(*gain).data();
                if want(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let (dyr, hr) = (&dy[range.clone()], &xhat[range.clone()]);
                        let dh: Vec<f64> = dyr.iter().zip(g).map(|(d, g)| d * g).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = inv * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    grads.push((*x, dx));
                }
                if want(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (i, (d, h)) in dy.iter().zip(xhat).enumerate() {
                        dg[i % cols] += d * h;
                    }
                    grads.push((*gain, dg));
                }
                if want(*bias) {
                    let mut db = vec![0.0; cols];
                    for (i, d) in dy.iter().enumerate() {
                        db[i % cols] += d;
                    }
                    grads.push((*bias, db));
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; dy.len()];
                for ((dxr, dyr), yr) in dx.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = dyr.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for c in 0..cols {
                        dxr[c] = yr[c] * (dyr[c] - dot);
                    }
                }
                grads.push((*a, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                let scale = dy[0] / labels.len() as f64;
                let mut dl = probs.clone();
                for (row, &label) in dl.chunks_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                grads.push((*logits, dl));
            }
            Op::Sum(a) => grads.push((*a, vec![dy[0]; self.value(*a).numel()])),
            Op::MeanPool { x, group } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = dy[(r / group) * cols + c] / *group as f64;
                    }
                }
                grads.push((*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let (rows, dim) = (node.value.rows(), node.value.cols());
                let batch = rows / seq;
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; rows * dim];
                let mut dk = vec![0.0; rows * dim];
                let mut dv = vec![0.0; rows * dim];
                let blk = seq * hd;
                let (mut qh, mut kh, mut vh, mut doh) =
                    (vec![0.0; blk], vec![0.0; blk], vec![0.0; blk], vec![0.0; blk]);
                let (mut dqh, mut dkh, mut dvh) = (vec![0.0; blk], vec![0.0; blk], vec![0.0; blk]);
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let block = HeadBlock { b, h, seq, dim, hd };
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        block.gather(qd, &mut qh);
                        block.gather(kd, &mut kh);
                        block.gather(vd, &mut vh);
                        block.gather(dy, &mut doh);
                        for buf in [&mut dqh, &mut dkh, &mut dvh] {
                            buf.iter_mut().for_each(|v| *v = 0.0);
                        }
                        dp.iter_mut().for_each(|v| *v = 0.0);
                        matmul_tn(p, &doh, &mut dvh, seq, seq, hd);
                        matmul_nt(&doh, &vh, &mut dp, seq, hd, seq);
                        for (row, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                            let dot: f64 = row.iter().zip(pr).map(|(d, p)| d * p).sum();
                            for (d, p) in row.iter_mut().zip(pr) {
                                *d = p * (*d - dot) * scale;
                            }
                        }
                        matmul_nn(&dp, &kh, &mut dqh, seq, seq, hd);
                        matmul_tn(&dp, &qh, &mut dkh, seq, seq, hd);
                        block.scatter_add(&dqh, &mut dq);
                        block.scatter_add(&dkh, &mut dk);
                        block.scatter_add(&dvh, &mut dv);
                    }
                }
                grads.push((*q, dq));
                grads.push((*k, dk));
                grads.push((*v, dv));
            }
        }
        grads
    }
}

/// One (example, head) slice of a `[batch·seq, dim]` activation.
struct HeadBlock {
    b: usize,
    h: usize,
    seq: usize,
    dim: usize,
    hd: usize,
}

impl HeadBlock {
    fn gather(&self, src: &[f64], dst: &mut [f64]) {
        for (i, row) in dst.chunks_mut(self.hd).enumerate() {
            let at = (self.b * self.seq + i) * self.dim + self.h * self.hd;
            row.copy_from_slice(&src[at..at + self.hd]);
        }
    }

    fn scatter_add(&self, src: &[f64], dst: &mut [f64]) {
        for (i, row) in src.chunks(self.hd).enumerate() {
            let at = (self.b * self.seq + i) * self.dim + self.h * self.hd;
            dst[at..at + self.hd].iter_mut().zip(row).for_each(|(d, s)| *d += s);
        }
    }
}

fn broadcast_compatible(a: &Tensor, b: &Tensor) -> bool {
    if a.shape() == b.shape() {
        return true;
    }
    let tiled = a.shape().len() == b.shape().len()
        && a.shape()[1..] == b.shape()[1..]
        && a.shape()[0].is_multiple_of(b.shape()[0]);
    let row_vector = b.shape().len() == 1 && b.numel() == a.cols();
    tiled || row_vector
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
