//! Dynamic computation tape with reverse-mode differentiation.
//!
//! A [`Graph`] records every op of one forward pass. Parameters are read
//! from a borrowed [`ParamStore`]; `backward` returns a [`Gradients`] map
//! that the caller folds back into the store once the graph is dropped.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::param::{Gradients, ParamId, ParamStore};
use crate::nn::tensor::{log_sum_exp, softmax, Tensor};

pub type NodeId = usize;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Const,
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    MaskCols {
        x: NodeId,
        mask: Vec<f32>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f32>,
    },
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Mse(NodeId, NodeId),
    MseRows {
        x: NodeId,
        target: Vec<f32>,
        rows: Vec<bool>,
        count: usize,
    },
    Scale(NodeId, f32),
    SumAll(NodeId),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `c[n x m] += a[n x k] * b[k x m]`
fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so it vectorises.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c[n x m] += a[n x k] * b[m x k]^T`
fn matmul_bt_acc(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            c[i * m + j] += dot(arow, brow);
        }
    }
}

/// `c[k x m] += a[n x k]^T * b[n x m]`
fn matmul_at_acc(a: &[f32], b: &[f32], c: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match (&self.nodes[id].op, &self.nodes[id].value) {
            (Op::Param(p), _) => self.store.value(*p),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        check_finite(&value, name)?;
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let requires_grad = self.store.get(id).trainable;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Const, t, false, "constant")
    }

    /// Copies a node's value into a new constant (stops gradient flow).
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::TokenOutOfRange {
                    token: i as u32,
                    vocab: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(ids.len(), cols, out)?;
        let rg = self.rg(table);
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
            rg,
            "embed",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), value, rg, "add")
    }

    /// Adds a length-`cols` bias vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.numel() != ta.cols() {
            return Err(mismatch("add_row", ta, tb));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % c])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddRow(a, bias), value, rg, "add_row")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(mismatch("matmul", ta, tb));
        }
        let m = tb.cols();
        let mut out = vec![0.0; n * m];
        matmul_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::matrix(n, m, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), value, rg, "matmul")
    }

    /// `a * b^T`, used by a weight-tied output head.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.cols() != k {
            return Err(mismatch("matmul_bt", ta, tb));
        }
        let m = tb.rows();
        let mut out = vec![0.0; n * m];
        matmul_bt_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::matrix(n, m, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulBT(a, b), value, rg, "matmul_bt")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f32 = 1e-5;
        let tx = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let (n, c) = (tx.rows(), tx.cols());
        if g.numel() != c || b.numel() != c {
            return Err(mismatch("layer_norm", tx, g));
        }
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = tx.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = (1.0 / (var + EPS as f64).sqrt()) as f32;
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean as f32) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            value,
            rg,
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| gelu(v)).collect())?;
        let rg = self.rg(x);
        self.push(Op::Gelu(x), value, rg, "gelu")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.tanh()).collect())?;
        let rg = self.rg(x);
        self.push(Op::Tanh(x), value, rg, "tanh")
    }

    /// Multiplies column `j` of every row by `mask[j]`.
    pub fn mask_cols(&mut self, x: NodeId, mask: &[f32]) -> Result<NodeId> {
        let tx = self.value(x);
        let c = tx.cols();
        if mask.len() != c {
            return Err(Error::ShapeMismatch {
                op: "mask_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * mask[i % c])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(
            Op::MaskCols {
                x,
                mask: mask.to_vec(),
            },
            value,
            rg,
            "mask_cols",
        )
    }

    /// Causal multi-head scaled dot-product attention over `[T x M]` inputs.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        let (t, m) = (tq.rows(), tq.cols());
        if heads == 0 || m % heads != 0 {
            return Err(Error::InvalidConfig(format!("{m} not divisible by {heads} heads")));
        }
        let d = m / heads;
        let scale = 1.0 / (d as f32).sqrt();
        let mut probs = vec![0.0f32; heads * t * t];
        let mut out = vec![0.0f32; t * m];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![0.0f32; t];
        for h in 0..heads {
            let off = h * d;
            for i in 0..t {
                let qi = &qd[i * m + off..i * m + off + d];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kd[j * m + off..j * m + off + d];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let orow = &mut out[i * m + off..i * m + off + d];
                for j in 0..=i {
                    let p = scores[j] / sum;
                    prow[j] = p;
                    let vj = &vd[j * m + off..j * m + off + d];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let value = Tensor::matrix(t, m, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            value,
            rg,
            "attention",
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..tx.rows() {
            data.extend(softmax(tx.row(r)));
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(Op::Softmax(x), value, rg, "softmax")
    }

    /// Mean over masked rows of `-log softmax(logits[t])[targets[t]]`, in nats.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let tl = self.value(logits);
        let (t, v) = (tl.rows(), tl.cols());
        if targets.len() != t || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask("cross_entropy"));
        }
        let mut total = 0.0f64;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let target = targets[r];
            if target >= v {
                return Err(Error::TokenOutOfRange {
                    token: target as u32,
                    vocab: v,
                });
            }
            let row = tl.row(r);
            total += log_sum_exp(row) - row[target] as f64;
        }
        let value = Tensor::scalar((total / count as f64) as f32);
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            value,
            rg,
            "cross_entropy",
        )
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        let value = Tensor::scalar((s / ta.numel() as f64) as f32);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mse(a, b), value, rg, "mse")
    }

    /// Mean squared distance between the selected rows of `x` and a
    /// constant target row broadcast across them.
    pub fn mse_rows(&mut self, x: NodeId, target: &[f32], rows: &[bool]) -> Result<NodeId> {
        let tx = self.value(x);
        let c = tx.cols();
        if target.len() != c || rows.len() != tx.rows() {
            return Err(Error::ShapeMismatch {
                op: "mse_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![rows.len(), target.len()],
            });
        }
        let count = rows.iter().filter(|&&r| r).count();
        if count == 0 {
            return Err(Error::EmptyMask("mse_rows"));
        }
        let mut s = 0.0f64;
        for (r, _) in rows.iter().enumerate().filter(|(_, &sel)| sel) {
            for (a, b) in tx.row(r).iter().zip(target) {
                s += ((a - b) as f64).powi(2);
            }
        }
        let value = Tensor::scalar((s / (count * c) as f64) as f32);
        let rg = self.rg(x);
        self.push(
            Op::MseRows {
                x,
                target: target.to_vec(),
                rows: rows.to_vec(),
                count,
            },
            value,
            rg,
            "mse_rows",
        )
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * factor).collect())?;
        let rg = self.rg(x);
        self.push(Op::Scale(x, factor), value, rg, "scale")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), Tensor::scalar(s as f32), rg, "sum_all")
    }

    /// Sum of a nonempty list of same-shaped nodes.
    pub fn sum(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = items.split_first().ok_or(Error::EmptyInput("sum"))?;
        rest.iter().try_fold(first, |acc, &n| self.add(acc, n))
    }

    /// Reverse pass from a scalar loss. Only trainable parameters receive
    /// gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::full(lt.shape(), 1.0));
        let mut by_param = BTreeMap::new();

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            check_finite(&g, "backward")?;
            match &self.nodes[id].op {
                Op::Param(p) => match by_param.entry(*p) {
                    Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    Entry::Occupied(mut e) => add_into(e.get_mut(), g.data()),
                },
                Op::Const => {}
                Op::Embed { table, ids } => {
                    if self.rg(*table) {
                        let tt = self.value(*table);
                        let c = tt.cols();
                        let dt = slot(&mut grads, *table, tt.shape());
                        for (r, &i) in ids.iter().enumerate() {
                            let src = &g.data()[r * c..(r + 1) * c];
                            for (d, s) in dt.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for n in [*a, *b] {
                        if self.rg(n) {
                            let shape = self.value(n).shape().to_vec();
                            add_into(slot(&mut grads, n, &shape), g.data());
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        add_into(slot(&mut grads, *a, &shape), g.data());
                    }
                    if self.rg(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        let c = g.cols();
                        let db = slot(&mut grads, *bias, &shape);
                        for r in 0..g.rows() {
                            for (d, s) in db.data_mut().iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let da = slot(&mut grads, *a, ta.shape());
                        matmul_bt_acc(g.data(), tb.data(), da.data_mut(), n, m, k);
                    }
                    if self.rg(*b) {
                        let db = slot(&mut grads, *b, tb.shape());
                        matmul_at_acc(ta.data(), g.data(), db.data_mut(), n, k, m);
                    }
                }
                Op::MatMulBT(a, b) => {
                    // out[n x m] = a[n x k] b[m x k]^T
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                    if self.rg(*a) {
                        let da = slot(&mut grads, *a, ta.shape());
                        matmul_acc(g.data(), tb.data(), da.data_mut(), n, m, k);
                    }
                    if self.rg(*b) {
                        let db = slot(&mut grads, *b, tb.shape());
                        matmul_at_acc(g.data(), ta.data(), db.data_mut(), n, m, k);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = g.cols();
                    let n = g.rows();
                    let gv = self.value(*gain).data().to_vec();
                    if self.rg(*gain) {
                        let shape = self.value(*gain).shape().to_vec();
                        let dg = slot(&mut grads, *gain, &shape);
                        for r in 0..n {
                            for j in 0..c {
                                dg.data_mut()[j] += g.data()[r * c + j] * xhat[r * c + j];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        let db = slot(&mut grads, *bias, &shape);
                        for r in 0..n {
                            for j in 0..c {
                                db.data_mut()[j] += g.data()[r * c + j];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let dx = slot(&mut grads, *x, &shape);
                        let mut dxhat = vec![0.0f32; c];
                        for r in 0..n {
                            let mut mean_d = 0.0f32;
                            let mut mean_dx = 0.0f32;
                            for j in 0..c {
                                let d = g.data()[r * c + j] * gv[j];
                                dxhat[j] = d;
                                mean_d += d;
                                mean_dx += d * xhat[r * c + j];
                            }
                            mean_d /= c as f32;
                            mean_dx /= c as f32;
                            for j in 0..c {
                                dx.data_mut()[r * c + j] +=
                                    rstd[r] * (dxhat[j] - mean_d - xhat[r * c + j] * mean_dx);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let dx = slot(&mut grads, *x, tx.shape());
                    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(tx.data()).zip(g.data()) {
                        *d += gv * gelu_grad(xv);
                    }
                }
                Op::Tanh(x) => {
                    let out = self.value(id);
                    let shape = self.value(*x).shape().to_vec();
                    let dx = slot(&mut grads, *x, &shape);
                    for ((d, &y), &gv) in dx.data_mut().iter_mut().zip(out.data()).zip(g.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }
                Op::MaskCols { x, mask } => {
                    let shape = self.value(*x).shape().to_vec();
                    let c = mask.len();
                    let dx = slot(&mut grads, *x, &shape);
                    for (i, (d, &gv)) in dx.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *d += gv * mask[i % c];
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (t, m) = (tq.rows(), tq.cols());
                    let d = m / heads;
                    let scale = 1.0 / (d as f32).sqrt();
                    let mut dq = vec![0.0f32; t * m];
                    let mut dk = vec![0.0f32; t * m];
                    let mut dv = vec![0.0f32; t * m];
                    let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());
                    let mut dp = vec![0.0f32; t];
                    for h in 0..*heads {
                        let off = h * d;
                        for i in 0..t {
                            let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                            let gi = &gd[i * m + off..i * m + off + d];
                            let mut pdot = 0.0f32;
                            for j in 0..=i {
                                let vj = &vd[j * m + off..j * m + off + d];
                                let s = dot(gi, vj);
                                dp[j] = s;
                                pdot += prow[j] * s;
                                let dvj = &mut dv[j * m + off..j * m + off + d];
                                for (x, &gv) in dvj.iter_mut().zip(gi) {
                                    *x += prow[j] * gv;
                                }
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - pdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..d {
                                    dq[i * m + off + c] += ds * kd[j * m + off + c];
                                    dk[j * m + off + c] += ds * qd[i * m + off + c];
                                }
                            }
                        }
                    }
                    for (n, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.rg(n) {
                            let shape = self.value(n).shape().to_vec();
                            add_into(slot(&mut grads, n, &shape), &buf);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = self.value(id);
                    let c = y.cols();
                    let shape = self.value(*x).shape().to_vec();
                    let dx = slot(&mut grads, *x, &shape);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let yg = dot(yr, gr);
                        for j in 0..c {
                            dx.data_mut()[r * c + j] += yr[j] * (gr[j] - yg);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    count,
                } => {
                    let tl = self.value(*logits);
                    let c = tl.cols();
                    let scale = g.item() / *count as f32;
                    let dl = slot(&mut grads, *logits, tl.shape());
                    for r in 0..tl.rows() {
                        if !mask[r] {
                            continue;
                        }
                        let p = softmax(tl.row(r));
                        let dst = &mut dl.data_mut()[r * c..(r + 1) * c];
                        for (j, (d, pj)) in dst.iter_mut().zip(p).enumerate() {
                            let y = if j == targets[r] { 1.0 } else { 0.0 };
                            *d += scale * (pj - y);
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let f = 2.0 * g.item() / ta.numel() as f32;
                    let diff: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| f * (x - y)).collect();
                    if self.rg(*a) {
                        add_into(slot(&mut grads, *a, ta.shape()), &diff);
                    }
                    if self.rg(*b) {
                        let db = slot(&mut grads, *b, tb.shape());
                        for (d, s) in db.data_mut().iter_mut().zip(&diff) {
                            *d -= s;
                        }
                    }
                }
                Op::MseRows {
                    x,
                    target,
                    rows,
                    count,
                } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let f = 2.0 * g.item() / (*count * c) as f32;
                    let dx = slot(&mut grads, *x, tx.shape());
                    for (r, _) in rows.iter().enumerate().filter(|(_, &sel)| sel) {
                        for j in 0..c {
                            dx.data_mut()[r * c + j] += f * (tx.data()[r * c + j] - target[j]);
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    let shape = self.value(*x).shape().to_vec();
                    let dx = slot(&mut grads, *x, &shape);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += factor * gv;
                    }
                }
                Op::SumAll(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let gv = g.item();
                    let dx = slot(&mut grads, *x, &shape);
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                }
            }
        }
        for g in by_param.values() {
            check_finite(g, "backward")?;
        }
        Ok(Gradients { by_param })
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'g mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &[f32]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}
