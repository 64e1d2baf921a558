//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends one node to a [`Tape`]. Nodes are created in
//! execution order and only ever refer to earlier nodes, so a reverse sweep
//! over the node list visits consumers before producers. Parameter tensors
//! are borrowed rather than copied; gradients come back as a [`Gradients`]
//! table indexed by [`Var`].

use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Row(Var, usize),
    SliceCols { src: Var, start: usize },
    Reshape(Var),
    WeightedSum { vectors: Vec<Var>, weights: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Dot(Var, Var),
    LogSumExp(Var),
    Select(Var, usize),
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Vec<bool>,
    /// heads × L × L attention probabilities, zero rows for masked queries.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for one forward/backward pass.
///
/// A tape is single-owner; run one per worker.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn cols_of(shape: &[usize]) -> usize {
    match shape.len() {
        0 => 1,
        1 => shape[0],
        _ => shape[1..].iter().product(),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable masked softmax; `None` when every entry is masked.
pub(crate) fn softmax_values(x: &[f64], mask: Option<&[bool]>) -> Option<Vec<f64>> {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let max = (0..x.len())
        .filter(|&i| keep(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = (0..x.len())
        .map(|i| if keep(i) { (x[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Some(out)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a borrowed tensor; it is differentiated iff `requires_grad` is set on it.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers an owned tensor as a leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    /// Non-differentiated leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Contract(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    /// Matrix product. A vector left operand of length `k` is treated as a
    /// `1 × k` row and yields a vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.shape(a) {
            [k] => (1, *k),
            _ => self.shape2(a, "matmul")?,
        };
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        let shape = if self.shape(a).len() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(shape, Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix (or to a length-`n` vector).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = cols_of(self.shape(a));
        if self.shape(bias) != [n] || self.shape(a).is_empty() {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddBias(a, bias), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over a vector. Entries whose mask is `false` get exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = match self.shape(x) {
            [n] => *n,
            s => return Err(Error::Contract(format!("softmax expects a vector, got {s:?}"))),
        };
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::dim("softmax", &[n], &[m.len()]));
            }
        }
        let out = softmax_values(self.value(x), mask)
            .ok_or_else(|| Error::Degenerate("softmax over an all-masked input".into()))?;
        let rg = self.rg(x);
        Ok(self.push(vec![n], Cow::Owned(out), Op::Softmax(x), rg))
    }

    /// Concatenates along `axis`. Axis 0 joins vectors end to end or stacks
    /// matrix rows; axis 1 joins matrix columns.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = self.shape(first).len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::Contract(format!(
                "concat axis {axis} invalid for rank {rank}"
            )));
        }
        let mut shape = self.shape(first).to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == shape[d]);
            if !compatible {
                return Err(Error::dim("concat", &shape, s));
            }
            shape[axis] += s[axis];
        }
        let mut out = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for r in 0..shape[0] {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equal-length vectors into a matrix, one vector per row.
    pub fn stack(&mut self, vectors: &[Var]) -> Result<Var> {
        let first = *vectors
            .first()
            .ok_or_else(|| Error::Contract("stack of zero vectors".into()))?;
        let d = match self.shape(first) {
            [d] => *d,
            s => return Err(Error::Contract(format!("stack expects vectors, got {s:?}"))),
        };
        let rows: Vec<Var> = vectors
            .iter()
            .map(|&v| self.reshape(v, vec![1, d]))
            .collect::<Result<_>>()?;
        self.concat(&rows, 0)
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = self.shape2(a, "row")?;
        if i >= m {
            return Err(Error::OutOfVocabulary { index: i, size: m });
        }
        let out = self.value(a)[i * n..(i + 1) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![n], Cow::Owned(out), Op::Row(a, i), rg))
    }

    /// Columns `start..start+len` of a matrix, or a sub-range of a vector.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (m, n) = match shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            s => return Err(Error::Contract(format!("slice expects rank 1 or 2, got {s:?}"))),
        };
        if start + len > n {
            return Err(Error::dim("slice_cols", &shape, &[start + len]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out_shape = if shape.len() == 1 { vec![len] } else { vec![m, len] };
        let rg = self.rg(a);
        Ok(self.push(out_shape, Cow::Owned(out), Op::SliceCols { src: a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, Cow::Owned(out), Op::Reshape(a), rg))
    }

    /// `Σ_i weights[i] · vectors[i]`.
    pub fn weighted_sum(&mut self, vectors: &[Var], weights: Var) -> Result<Var> {
        if self.shape(weights) != [vectors.len()] || vectors.is_empty() {
            return Err(Error::dim("weighted_sum", &[vectors.len()], self.shape(weights)));
        }
        let shape = self.shape(vectors[0]).to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (i, &v) in vectors.iter().enumerate() {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, self.shape(v)));
            }
            let w = self.value(weights)[i];
            for (o, x) in out.iter_mut().zip(self.value(v)) {
                *o += w * x;
            }
        }
        let rg = self.rg(weights) || vectors.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::WeightedSum {
                vectors: vectors.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Gathers rows of a `V × D` table into a `len(ids) × D` matrix.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape2(table, "embedding_lookup")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocabulary { index: id, size: v });
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Vec::new(), Cow::Owned(vec![s]), Op::Dot(a, b), rg))
    }

    /// `log Σ exp(a_i)`, stabilized by the maximum.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Degenerate("log-sum-exp of an empty vector".into()));
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), Cow::Owned(vec![s]), Op::LogSumExp(a), rg))
    }

    /// Element `i` of a flat tensor, as a scalar.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        if i >= n {
            return Err(Error::OutOfVocabulary { index: i, size: n });
        }
        let s = self.value(a)[i];
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), Cow::Owned(vec![s]), Op::Select(a, i), rg))
    }

    /// Multi-head scaled dot-product attention over the rows of already
    /// projected `q`, `k`, `v` (each `L × D`). Head `h` reads and writes
    /// columns `h·D/heads .. (h+1)·D/heads`. Keys with a `false` mask are
    /// excluded; query rows with a `false` mask produce zero output.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Result<Var> {
        let (l, d) = self.shape2(q, "multi_head_attention")?;
        self.same_shape(q, k, "multi_head_attention")?;
        self.same_shape(q, v, "multi_head_attention")?;
        if mask.len() != l {
            return Err(Error::dim("multi_head_attention", &[l], &[mask.len()]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide dimension {d}")));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Degenerate("attention over an all-masked sequence".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        let mut scores = vec![0.0; l];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..l {
                if !mask[i] {
                    continue;
                }
                for j in 0..l {
                    scores[j] = if mask[j] {
                        (0..dh).map(|c| qv[i * d + c0 + c] * kv[j * d + c0 + c]).sum::<f64>() * scale
                    } else {
                        0.0
                    };
                }
                let p = softmax_values(&scores, Some(mask)).expect("mask has a valid key");
                let prow = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                prow.copy_from_slice(&p);
                for j in 0..l {
                    if p[j] == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        out[i * d + c0 + c] += p[j] * vv[j * d + c0 + c];
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![l, d],
            Cow::Owned(out),
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                heads,
                mask: mask.to_vec(),
                probs,
            })),
            rg,
        ))
    }

    /// Attention probabilities recorded by a [`Tape::multi_head_attention`]
    /// node, as `heads × L × L` (row `i` of head `h` = weights of query `i`).
    pub fn attention_weights(&self, v: Var) -> Option<(usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention(rec) => Some((rec.heads, &rec.probs)),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = self.value(*a).len() / k;
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let ga = acc_buf(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let gb = acc_buf(grads, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g.len(), |i| g[i]);
                self.acc_map(grads, *b, g.len(), |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g.len(), |i| g[i]);
                self.acc_map(grads, *b, g.len(), |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_map(grads, *a, g.len(), |i| g[i] * bv[i]);
                self.acc_map(grads, *b, g.len(), |i| g[i] * av[i]);
            }
            Op::AddBias(a, bias) => {
                self.acc_map(grads, *a, g.len(), |i| g[i]);
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let gb = acc_buf(grads, *bias, n);
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                }
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, g.len(), |i| c * g[i]),
            Op::OneMinus(a) => self.acc_map(grads, *a, g.len(), |i| -g[i]),
            Op::Sigmoid(a) => self.acc_map(grads, *a, g.len(), |i| g[i] * y[i] * (1.0 - y[i])),
            Op::Tanh(a) => self.acc_map(grads, *a, g.len(), |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Softmax(a) => {
                let inner: f64 = y.iter().zip(g).map(|(p, gv)| p * gv).sum();
                self.acc_map(grads, *a, g.len(), |i| y[i] * (g[i] - inner));
            }
            Op::Concat { parts, axis } => {
                let out_cols = cols_of(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let n = self.value(p).len();
                    if *axis == 0 {
                        let o = offset;
                        self.acc_map(grads, p, n, |i| g[o + i]);
                        offset += n;
                    } else {
                        let c = shape[1];
                        let o = offset;
                        self.acc_map(grads, p, n, |i| g[(i / c) * out_cols + o + i % c]);
                        offset += c;
                    }
                }
            }
            Op::Row(a, r) => {
                let n = g.len();
                if self.rg(*a) {
                    let total = self.value(*a).len();
                    let ga = acc_buf(grads, *a, total);
                    for (o, gv) in ga[r * n..(r + 1) * n].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::SliceCols { src, start } => {
                if self.rg(*src) {
                    let n = cols_of(self.shape(*src));
                    let len = cols_of(&node.shape);
                    let total = self.value(*src).len();
                    let ga = acc_buf(grads, *src, total);
                    for (i, gv) in g.iter().enumerate() {
                        ga[(i / len) * n + start + i % len] += gv;
                    }
                }
            }
            Op::Reshape(a) => self.acc_map(grads, *a, g.len(), |i| g[i]),
            Op::WeightedSum { vectors, weights } => {
                let w = self.value(*weights);
                if self.rg(*weights) {
                    let dots: Vec<f64> = vectors
                        .iter()
                        .map(|&v| self.value(v).iter().zip(g).map(|(x, gv)| x * gv).sum())
                        .collect();
                    self.acc_map(grads, *weights, vectors.len(), |i| dots[i]);
                }
                for (i, &v) in vectors.iter().enumerate() {
                    let wi = w[i];
                    self.acc_map(grads, v, g.len(), |j| wi * g[j]);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let d = self.shape(*table)[1];
                    let total = self.value(*table).len();
                    let gt = acc_buf(grads, *table, total);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, gv) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc_map(grads, *a, n, |_| g[0]);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_map(grads, *a, av.len(), |i| g[0] * bv[i]);
                self.acc_map(grads, *b, bv.len(), |i| g[0] * av[i]);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let s = y[0];
                self.acc_map(grads, *a, x.len(), |i| g[0] * (x[i] - s).exp());
            }
            Op::Select(a, i) => {
                if self.rg(*a) {
                    let n = self.value(*a).len();
                    acc_buf(grads, *a, n)[*i] += g[0];
                }
            }
            Op::Attention(rec) => self.attention_backward(rec, &node.shape, g, grads),
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, shape: &[usize], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (l, d) = (shape[0], shape[1]);
        let dh = d / rec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let mut gq = vec![0.0; l * d];
        let mut gk = vec![0.0; l * d];
        let mut gv = vec![0.0; l * d];
        let mut dp = vec![0.0; l];
        for h in 0..rec.heads {
            let c0 = h * dh;
            for i in 0..l {
                if !rec.mask[i] {
                    continue;
                }
                let p = &rec.probs[(h * l + i) * l..(h * l + i + 1) * l];
                let grow = &g[i * d + c0..i * d + c0 + dh];
                for j in 0..l {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = (0..dh).map(|c| grow[c] * vv[j * d + c0 + c]).sum();
                    for c in 0..dh {
                        gv[j * d + c0 + c] += p[j] * grow[c];
                    }
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..l {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - inner) * scale;
                    for c in 0..dh {
                        gq[i * d + c0 + c] += ds * kv[j * d + c0 + c];
                        gk[j * d + c0 + c] += ds * qv[i * d + c0 + c];
                    }
                }
            }
        }
        self.acc_map(grads, rec.q, l * d, |i| gq[i]);
        self.acc_map(grads, rec.k, l * d, |i| gk[i]);
        self.acc_map(grads, rec.v, l * d, |i| gv[i]);
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], target: Var, n: usize, f: impl Fn(usize) -> f64) {
        if !self.rg(target) {
            return;
        }
        let buf = acc_buf(grads, target, n);
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(i);
        }
    }
}

fn acc_buf(grads: &mut [Option<Vec<f64>>], target: Var, n: usize) -> &mut Vec<f64> {
    grads[target.0].get_or_insert_with(|| vec![0.0; n])
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` was unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` with unreachable nodes reported as zeros of length `n`.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec)
    }

    /// Stores the gradient of `v` on `t`, zero-filled when unreachable.
    pub fn write_to(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self.get_or_zeros(v, t.numel());
        t.set_grad(g)
    }
}
