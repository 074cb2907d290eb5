//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid reverse
//! topological order. The operation set is deliberately small: affine maps,
//! pointwise nonlinearities, softmax cross-entropy, squared distances,
//! reductions, column concatenation/slicing, row gathers (embedding lookup)
//! and causal self-attention. Recurrent cells are composed from these.
//!
//! Parameters are bound with [`Graph::param`], which memoizes by address so a
//! network can call it from every forward helper and still get one leaf per
//! tensor. Everything in a graph is immutable once recorded, so a graph is
//! built per forward pass and thrown away after the gradients are read.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
        scale: f64,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    Reshape(Var),
    NegSqDist(Var, Var),
    MeanPairwiseSqDist(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients of one scalar with respect to every node that feeds it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written in place.
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

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter tensor, returning the same leaf on repeated calls.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let key = tensor as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(tensor.clone());
        self.params.insert(key, v);
        v
    }

    /// Leaf previously bound for `tensor` with [`Graph::param`].
    pub fn param_var(&self, tensor: &Tensor) -> Option<Var> {
        self.params.get(&(tensor as *const Tensor as usize)).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a `[1, n]` (or `[n]`) bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(shape_err(format!(
                "bias {:?} for {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + offset);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Cross-entropy of row-wise softmax against integer targets, using the
    /// max-subtraction form of log-sum-exp.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (m, k) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return Err(shape_err(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range for {k} classes"
            )));
        }
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / m.max(1) as f64,
            Reduction::Sum => 1.0,
        };
        let out = Tensor::scalar(total * scale);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        ))
    }

    /// Selects rows of a `[V, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "row id {id} out of range for table with {v} rows"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| shape_err("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat of tensors with differing row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let sv = self.value(src);
        if start + len > sv.cols() {
            return Err(shape_err(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                sv.shape()
            )));
        }
        let rows = sv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&sv.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { src, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `out[i, k] = -||z_i - e_k||^2` for `z [n, d]` and `e [V, d]`.
    pub fn neg_sq_dist(&mut self, z: Var, e: Var) -> Result<Var> {
        let (zv, ev) = (self.value(z), self.value(e));
        if zv.cols() != ev.cols() {
            return Err(shape_err(format!(
                "distance between {:?} and {:?}",
                zv.shape(),
                ev.shape()
            )));
        }
        let (n, v) = (zv.rows(), ev.rows());
        let mut out = Vec::with_capacity(n * v);
        for i in 0..n {
            let zi = zv.row(i);
            for k in 0..v {
                let d2: f64 = zi
                    .iter()
                    .zip(ev.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out.push(-d2);
            }
        }
        let value = Tensor::new(vec![n, v], out)?;
        Ok(self.push(value, Op::NegSqDist(z, e)))
    }

    /// `2 / (B (B-1)) * sum_{i<j} ||z_i - z_j||^2` over the rows of `z`
    /// (0 when there are fewer than two rows).
    pub fn mean_pairwise_sq_dist(&mut self, z: Var) -> Var {
        let zv = self.value(z);
        let b = zv.rows();
        let mut total = 0.0;
        for i in 0..b {
            for j in i + 1..b {
                total += zv
                    .row(i)
                    .iter()
                    .zip(zv.row(j))
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>();
            }
        }
        let value = if b < 2 {
            0.0
        } else {
            2.0 * total / (b * (b - 1)) as f64
        };
        self.push(Tensor::scalar(value), Op::MeanPairwiseSqDist(z))
    }

    /// Multi-head scaled dot-product attention where position `i` of each
    /// length-`seq_len` sequence attends to positions `0..=i` only. Inputs are
    /// `[batch * seq_len, heads * head_dim]`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err("attention q/k/v shapes differ"));
        }
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || width % heads != 0 {
            return Err(shape_err(format!(
                "attention over {rows}x{width} with seq_len {seq_len}, heads {heads}"
            )));
        }
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let batch = rows / seq_len;
        // probs[((b * heads + h) * seq_len + i) * seq_len + j], zero for j > i
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * width];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * width + off..][..hd];
                    let p = &mut probs[((b * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    for j in 0..=i {
                        let kj = &kd[(b * seq_len + j) * width + off..][..hd];
                        p[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    softmax_in_place(&mut p[..=i]);
                    let o = &mut out[(b * seq_len + i) * width + off..][..hd];
                    for j in 0..=i {
                        let vj = &vd[(b * seq_len + j) * width + off..][..hd];
                        for (oo, &x) in o.iter_mut().zip(vj) {
                            *oo += p[j] * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to each of `wrt`.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut grads = self.backward(loss)?;
        wrt.iter()
            .map(|&v| grads.take(v).ok_or(Error::NotInGraph))
            .collect()
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |var: Var, delta: Tensor| {
            match &mut grads[var.0] {
                Some(existing) => existing.add_scaled(&delta, 1.0),
                slot @ None => *slot = Some(delta),
            };
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                matmul_bt_acc(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_acc(av.data(), g.data(), &mut db, m, k, n);
                acc(*a, Tensor::new(av.shape().to_vec(), da)?);
                acc(*b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::AddBias(a, bias) => {
                let bv = self.value(*bias);
                let mut db = vec![0.0; bv.len()];
                for r in 0..g.rows() {
                    for (d, &x) in db.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
            }
            Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y))?),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))?),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)?),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)?),
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::filled(av.shape(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::filled(av.shape(), g.item() / av.len() as f64));
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut da = p.clone();
                for r in 0..p.rows() {
                    let (pr, gr) = (p.row(r), g.row(r));
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((d, &pv), &gv) in da.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *d = pv * (gv - dot);
                    }
                }
                acc(*a, da);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= 1.0;
                }
                let s = scale * g.item();
                d.data_mut().iter_mut().for_each(|v| *v *= s);
                acc(*logits, d);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*table, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut d = Vec::with_capacity(pv.len());
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    acc(p, Tensor::new(pv.shape().to_vec(), d)?);
                    start += w;
                }
            }
            Op::SliceCols { src, start } => {
                let sv = self.value(*src);
                let mut d = Tensor::zeros(sv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(*src, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.clone().reshape(&shape)?);
            }
            Op::NegSqDist(z, e) => {
                let (zv, ev) = (self.value(*z), self.value(*e));
                let mut dz = Tensor::zeros(zv.shape());
                let mut de = Tensor::zeros(ev.shape());
                for i in 0..zv.rows() {
                    for k in 0..ev.rows() {
                        let gik = g.at(i, k);
                        if gik == 0.0 {
                            continue;
                        }
                        let (zi, ek) = (zv.row(i), ev.row(k));
                        // d(-||z-e||^2)/dz = -2(z-e)
                        let dzi = dz.row_mut(i);
                        for c in 0..zi.len() {
                            dzi[c] -= 2.0 * gik * (zi[c] - ek[c]);
                        }
                        let dek = de.row_mut(k);
                        for c in 0..zi.len() {
                            dek[c] += 2.0 * gik * (zi[c] - ek[c]);
                        }
                    }
                }
                acc(*z, dz);
                acc(*e, de);
            }
            Op::MeanPairwiseSqDist(z) => {
                let zv = self.value(*z);
                let b = zv.rows();
                let mut dz = Tensor::zeros(zv.shape());
                if b >= 2 {
                    let coeff = 2.0 / (b * (b - 1)) as f64 * g.item();
                    let w = zv.cols();
                    let mut total = vec![0.0; w];
                    for r in 0..b {
                        for (t, &x) in total.iter_mut().zip(zv.row(r)) {
                            *t += x;
                        }
                    }
                    // d/dz_i sum_{i<j} ||z_i - z_j||^2 = 2 (B z_i - sum_j z_j)
                    for r in 0..b {
                        let zr = zv.row(r).to_vec();
                        for ((d, &x), &t) in dz.row_mut(r).iter_mut().zip(&zr).zip(&total) {
                            *d = coeff * 2.0 * (b as f64 * x - t);
                        }
                    }
                }
                acc(*z, dz);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, width) = (qv.rows(), qv.cols());
                let (n, heads) = (*seq_len, *heads);
                let hd = width / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let batch = rows / n;
                let mut dq = vec![0.0; rows * width];
                let mut dk = vec![0.0; rows * width];
                let mut dv = vec![0.0; rows * width];
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut dp = vec![0.0; n];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * hd;
                        for i in 0..n {
                            let p = &probs[((b * heads + h) * n + i) * n..][..n];
                            let go = &gd[(b * n + i) * width + off..][..hd];
                            for j in 0..=i {
                                let vj = &vd[(b * n + j) * width + off..][..hd];
                                dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                let dvj = &mut dv[(b * n + j) * width + off..][..hd];
                                for (d, &x) in dvj.iter_mut().zip(go) {
                                    *d += p[j] * x;
                                }
                            }
                            let dot: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[(b * n + j) * width + off..][..hd];
                                let dqi = &mut dq[(b * n + i) * width + off..][..hd];
                                for (d, &x) in dqi.iter_mut().zip(kj) {
                                    *d += ds * x;
                                }
                                let qi = &qd[(b * n + i) * width + off..][..hd];
                                let dkj = &mut dk[(b * n + j) * width + off..][..hd];
                                for (d, &x) in dkj.iter_mut().zip(qi) {
                                    *d += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, Tensor::new(qv.shape().to_vec(), dq)?);
                acc(*k, Tensor::new(kv.shape().to_vec(), dk)?);
                acc(*v, Tensor::new(vv.shape().to_vec(), dv)?);
            }
        }
        Ok(())
    }
}
