//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records operations in execution order; [`Tape::backward`]
//! walks it in reverse. Constants (frozen weights) are borrowed for the
//! lifetime of the tape and never receive gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Optimizer group a trainable parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Adapters, routers, task embeddings and soft prompts.
    Adapter,
    /// The visual projector.
    Projector,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub group: ParamGroup,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, group: ParamGroup) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Self { id: ParamId::fresh(), value, grad, group, trainable: true }
    }

    #[inline]
    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Val<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Val<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    MulColumn(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Silu(Var),
    RmsNorm(Var, Vec<T>),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    MeanRows(Var),
    RepeatRows(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor<T>> },
    CrossEntropySum { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
    Cosine(Var, Var),
    SumAll(Var),
}

struct Node<'a, T> {
    value: Val<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const RMS_EPS: f64 = 1e-6;

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Val::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    #[inline]
    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { value: Val::Borrowed(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter leaf. Repeated calls with the same parameter
    /// return the same variable so its gradient accumulates once.
    pub fn param(&mut self, p: &'a Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        self.nodes.push(Node { value: Val::Borrowed(&p.value), op: Op::Leaf, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(p.id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, the shape of a linear layer with weight `b` (out × in).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += x;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Multiplies every entry of `a` by the `1 × 1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1));
        let out = self.value(a).scaled(sv.get(0, 0));
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n × 1`).
    pub fn mul_column(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col);
        let mut out = self.value(a).clone();
        assert_eq!(c.shape(), (out.rows(), 1));
        for i in 0..out.rows() {
            let s = c.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(out, Op::MulColumn(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let eps = T::lit(RMS_EPS);
        let cols = T::from_usize_lossy(x.cols());
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let ms: T = x.row(i).iter().map(|&v| v * v).sum::<T>() / cols;
            let r = T::one() / (ms + eps).sqrt();
            out.row_mut(i).iter_mut().for_each(|v| *v *= r);
            inv.push(r);
        }
        let rg = self.rg(a);
        self.push(out, Op::RmsNorm(a, inv), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let sm = crate::scalar::softmax(x.row(i));
            out.row_mut(i).copy_from_slice(&sm);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows(), y.rows());
        let mut out = Tensor::zeros(x.rows(), x.cols() + y.cols());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            row[..x.cols()].copy_from_slice(x.row(i));
            row[x.cols()..].copy_from_slice(y.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.rows());
        let data = x.data()[start * x.cols()..end * x.cols()].to_vec();
        let out = Tensor::from_vec(end - start, x.cols(), data);
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_usize_lossy(x.rows());
        let mut out = Tensor::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        out.data_mut().iter_mut().for_each(|o| *o /= n);
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Tiles a `1 × c` row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), 1);
        let mut data = Vec::with_capacity(n * x.cols());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let out = Tensor::from_vec(n, x.cols(), data);
        let rg = self.rg(a);
        self.push(out, Op::RepeatRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Causal multi-head scaled dot-product attention over `n × d` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let inv_sqrt = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Tensor::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row(i)[off..off + dh];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let kj = &kv.row(j)[off..off + dh];
                    scores.push(crate::scalar::dot(qi, kj) * inv_sqrt);
                }
                let sm = crate::scalar::softmax(&scores);
                let prow = p.row_mut(i);
                prow[..=i].copy_from_slice(&sm);
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (j, &w) in sm.iter().enumerate() {
                    let vj = &vv.row(j)[off..off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Sum over rows of `-log softmax(logits_i)[targets_i]`, as a `1 × 1`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len());
        let mut probs = x.clone();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let sm = crate::scalar::softmax(x.row(i));
            let row = x.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            probs.row_mut(i).copy_from_slice(&sm);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Cosine similarity between two equally shaped tensors, as a `1 × 1`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let c = crate::scalar::cosine(self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(c), Op::Cosine(a, b), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut r = Tensor::zeros(1, g.cols());
                    for k in 0..g.rows() {
                        for (o, &x) in r.data_mut().iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    acc(grads, *row, r);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                    acc(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                    acc(grads, *b, Tensor::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).get(0, 0);
                if self.rg(*a) {
                    acc(grads, *a, g.scaled(sv));
                }
                if self.rg(*s) {
                    let d = crate::scalar::dot(g.data(), self.value(*a).data());
                    acc(grads, *s, Tensor::scalar(d));
                }
            }
            Op::MulColumn(a, col) => {
                let c = self.value(*col);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for k in 0..d.rows() {
                        let s = c.get(k, 0);
                        d.row_mut(k).iter_mut().for_each(|x| *x *= s);
                    }
                    acc(grads, *a, d);
                }
                if self.rg(*col) {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(c.rows(), 1);
                    for k in 0..x.rows() {
                        d.set(k, 0, crate::scalar::dot(g.row(k), x.row(k)));
                    }
                    acc(grads, *col, d);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.scaled(*s)),
            Op::Tanh(a) => {
                let y = node.value.get();
                let d = g.data().iter().zip(y.data()).map(|(&gg, &yy)| gg * (T::one() - yy * yy)).collect();
                acc(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gg, &xx)| {
                        let s = T::one() / (T::one() + (-xx).exp());
                        gg * (s + xx * s * (T::one() - s))
                    })
                    .collect();
                acc(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::RmsNorm(a, inv) => {
                let y = node.value.get();
                let cols = T::from_usize_lossy(y.cols());
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for k in 0..y.rows() {
                    let gy = crate::scalar::dot(g.row(k), y.row(k)) / cols;
                    for ((o, &gg), &yy) in d.row_mut(k).iter_mut().zip(g.row(k)).zip(y.row(k)) {
                        *o = (gg - yy * gy) * inv[k];
                    }
                }
                acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.get();
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for k in 0..y.rows() {
                    let gy = crate::scalar::dot(g.row(k), y.row(k));
                    for ((o, &gg), &yy) in d.row_mut(k).iter_mut().zip(g.row(k)).zip(y.row(k)) {
                        *o = yy * (gg - gy);
                    }
                }
                acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let data = g.data()[start * g.cols()..(start + r) * g.cols()].to_vec();
                        acc(grads, p, Tensor::from_vec(r, g.cols(), data));
                    }
                    start += r;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Tensor::zeros(g.rows(), ca);
                let mut db = Tensor::zeros(g.rows(), cb);
                for k in 0..g.rows() {
                    da.row_mut(k).copy_from_slice(&g.row(k)[..ca]);
                    db.row_mut(k).copy_from_slice(&g.row(k)[ca..]);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = T::from_usize_lossy(x.rows());
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for k in 0..x.rows() {
                    for (o, &gg) in d.row_mut(k).iter_mut().zip(g.data()) {
                        *o = gg / n;
                    }
                }
                acc(grads, *a, d);
            }
            Op::RepeatRows(a) => {
                let mut d = Tensor::zeros(1, g.cols());
                for k in 0..g.rows() {
                    for (o, &gg) in d.data_mut().iter_mut().zip(g.row(k)) {
                        *o += gg;
                    }
                }
                acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, g.clone().reshaped(r, c));
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, grads, &acc);
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let scale = g.get(0, 0);
                let mut d = probs.clone();
                for (k, &t) in targets.iter().enumerate() {
                    let cell = d.get(k, t);
                    d.set(k, t, cell - T::one());
                }
                acc(grads, *logits, d.scaled(scale));
            }
            Op::Cosine(a, b) => {
                let gs = g.get(0, 0);
                let (x, y) = (self.value(*a), self.value(*b));
                let nx = crate::scalar::norm(x.data());
                let ny = crate::scalar::norm(y.data());
                if nx == T::zero() || ny == T::zero() {
                    return;
                }
                let c = node.value.get().get(0, 0);
                if self.rg(*a) {
                    let d = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&xi, &yi)| gs * (yi / (nx * ny) - c * xi / (nx * nx)))
                        .collect();
                    acc(grads, *a, Tensor::from_vec(x.rows(), x.cols(), d));
                }
                if self.rg(*b) {
                    let d = y
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&yi, &xi)| gs * (xi / (nx * ny) - c * yi / (ny * ny)))
                        .collect();
                    acc(grads, *b, Tensor::from_vec(y.rows(), y.cols(), d));
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.get(0, 0)));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Tensor<T>],
        grads: &mut [Option<Tensor<T>>],
        acc: &impl Fn(&mut [Option<Tensor<T>>], Var, Tensor<T>),
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let dh = d / heads;
        let inv_sqrt = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut dq = Tensor::zeros(n, d);
        let mut dk = Tensor::zeros(n, d);
        let mut dv = Tensor::zeros(n, d);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            for i in 0..n {
                let go = &g.row(i)[off..off + dh];
                // dP_ij = <dO_i, V_j>, dS = P ⊙ (dP − Σ_j P_ij dP_ij)
                let mut dp = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    dp.push(crate::scalar::dot(go, &vv.row(j)[off..off + dh]));
                }
                let prow = &p.row(i)[..=i];
                let inner = crate::scalar::dot(prow, &dp);
                for j in 0..=i {
                    let pij = prow[j];
                    // dV_j += P_ij dO_i
                    for (o, &x) in dv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                        *o += pij * x;
                    }
                    let ds = pij * (dp[j] - inner) * inv_sqrt;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj: Vec<T> = kv.row(j)[off..off + dh].to_vec();
                    for (o, &x) in dq.row_mut(i)[off..off + dh].iter_mut().zip(&kj) {
                        *o += ds * x;
                    }
                    let qi: Vec<T> = qv.row(i)[off..off + dh].to_vec();
                    for (o, &x) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        acc(grads, q, dq);
        acc(grads, k, dk);
        acc(grads, v, dv);
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grad(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id).and_then(|&v| self.grad(v))
    }

    /// Consumes the tape and returns the gradient of every parameter it saw.
    pub fn into_param_grads(mut self) -> HashMap<ParamId, Tensor<T>> {
        let mut out = HashMap::with_capacity(self.params.len());
        for (id, v) in self.params.drain() {
            if let Some(Some(g)) = self.grads.get_mut(v.0).map(Option::take) {
                out.insert(id, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` with respect to every entry of `p`.
    fn check_grad(p: &mut Param<f64>, f: impl Fn(&Param<f64>) -> (f64, Tensor<f64>)) {
        let (_, analytic) = f(p);
        let eps = 1e-5;
        for idx in 0..p.value.len() {
            let orig = p.value.data()[idx];
            p.value.data_mut()[idx] = orig + eps;
            let (lp, _) = f(p);
            p.value.data_mut()[idx] = orig - eps;
            let (lm, _) = f(p);
            p.value.data_mut()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[idx];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {idx}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(5, 6, 1.0, &mut rng);
        let w = Tensor::<f64>::randn(6, 6, 0.5, &mut rng);
        let targets = [1usize, 0, 3, 2, 5];
        let mut p = Param::new(Tensor::randn(6, 6, 0.5, &mut rng), ParamGroup::Adapter);
        check_grad(&mut p, |p| {
            let mut tape = Tape::new();
            let xv = tape.constant_ref(&x);
            let wv = tape.constant_ref(&w);
            let pv = tape.param(p);
            let h = tape.matmul_t(xv, pv);
            let h = tape.rms_norm(h);
            let q = tape.matmul_t(h, wv);
            let a = tape.causal_attention(q, h, h, 2);
            let s = tape.silu(a);
            let t = tape.tanh(s);
            let pooled = tape.mean_rows(t);
            let rep = tape.repeat_rows(pooled, 5);
            let z = tape.add(t, rep);
            let loss = tape.cross_entropy_sum(z, &targets);
            tape.backward(loss);
            let l = tape.value(loss).get(0, 0);
            (l, tape.param_grad(p).unwrap().clone())
        });
    }

    #[test]
    fn routing_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(4, 3, 1.0, &mut rng);
        let target = Tensor::<f64>::randn(1, 2, 1.0, &mut rng);
        let mut p = Param::new(Tensor::randn(2, 5, 0.5, &mut rng), ParamGroup::Adapter);
        check_grad(&mut p, |p| {
            let mut tape = Tape::new();
            let xv = tape.constant_ref(&x);
            let tv = tape.constant_ref(&target);
            let pv = tape.param(p);
            let tv_rows = tape.repeat_rows(tv, 4);
            let cat = tape.concat_cols(xv, tv_rows);
            let logits = tape.matmul_t(cat, pv);
            let w = tape.softmax_rows(logits);
            let first = tape.matmul(w, pv);
            let c0 = tape.slice_rows(first, 0, 1);
            let c0 = tape.scale(c0, 0.7);
            let flat = tape.reshape(c0, 5, 1);
            let flat = tape.reshape(flat, 1, 5);
            let mixed = tape.concat_rows(&[flat, first]);
            let m = tape.mean_rows(mixed);
            let s = tape.sum_all(m);
            let scaled = tape.mul_scalar(m, s);
            let sel = tape.matmul_t(scaled, pv);
            let cosv = tape.cosine(sel, tv);
            tape.backward(cosv);
            (tape.value(cosv).get(0, 0), tape.param_grad(p).unwrap().clone())
        });
    }

    #[test]
    fn mul_column_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let mut p = Param::new(Tensor::randn(3, 1, 1.0, &mut rng), ParamGroup::Adapter);
        check_grad(&mut p, |p| {
            let mut tape = Tape::new();
            let xv = tape.constant_ref(&x);
            let pv = tape.param(p);
            let y = tape.mul_column(xv, pv);
            let z = tape.mul(y, y);
            let r = tape.sum_all(z);
            tape.backward(r);
            (tape.value(r).get(0, 0), tape.param_grad(p).unwrap().clone())
        });
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(1, 256));
        let loss = tape.cross_entropy_sum(logits, &[42]);
        assert!((tape.value(loss).get(0, 0) - (256f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = Tensor::<f64>::filled(2, 2, 1.0);
        let p = Param::new(Tensor::filled(1, 2, 0.5), ParamGroup::Adapter);
        let mut tape = Tape::new();
        let wv = tape.constant_ref(&w);
        let pv = tape.param(&p);
        let y = tape.matmul_t(pv, wv);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert!(tape.grad(wv).is_none());
        assert!(tape.grad(pv).is_some());
    }
}
