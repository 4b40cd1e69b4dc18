//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows the parameter store for one forward/backward pass.
//! Nodes are appended in evaluation order, so reverse insertion order is a
//! valid reverse topological order.

use super::dense::{gemm, Tensor};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Value written into masked attention scores. Finite so softmax backward
/// never meets `inf - inf`; `exp(-1e9 - max)` underflows to exactly zero.
pub const MASK_FILL: f64 = -1e9;

const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    MaskedFill {
        x: Var,
        keep: Vec<bool>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        len: usize,
        heads: usize,
    },
    CrossEntropyRows {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    RowDot(Var, Var),
    LogSigmoid(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

/// Gradients of one backward pass, by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate(id, g);
            }
        }
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // exp(MASK_FILL - max) underflows to exactly 0 unless the whole row is masked.
            *v = if *v == MASK_FILL && max > MASK_FILL {
                0.0
            } else {
                (*v - max).exp()
            };
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

fn head_index(b: usize, l: usize, h: usize, len: usize, heads: usize) -> (usize, usize) {
    // (row in [B*L, H*dh], row in [B*H*L, dh]) without the feature offset.
    (b * len + l, (b * heads + h) * len + l)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-parameter node has a value"),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First op that produced a non-finite value (checked in debug builds).
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.is_finite() {
            let name = format!("{op:?}");
            let name = name
                .split([' ', '(', '{'])
                .next()
                .unwrap_or_default()
                .to_string();
            self.non_finite = Some(format!("node {} ({name})", self.nodes.len()));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a [m,k] x b [k,n]`, or `a x b^T` with `b [n,k]` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            false,
            tb.data(),
            trans_b,
            &mut out,
            false,
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Batched `[B,m,k] x [B,k,n]` (or `[B,n,k]` transposed when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if k != kb {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias to every row of `x [.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.numel() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.requires(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.requires(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalizes the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", tx, self.value(gamma)));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.last_dim();
        softmax_rows(out.data_mut(), cols);
        let rg = self.requires(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Replaces every position where `keep` is false by [`MASK_FILL`].
    pub fn masked_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let tx = self.value(x);
        if keep.len() != tx.numel() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: tx.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut out = tx.clone();
        for (v, &k) in out.data_mut().iter_mut().zip(&keep) {
            if !k {
                *v = MASK_FILL;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, Op::MaskedFill { x, keep }, rg))
    }

    /// Inverted dropout. Identity (no new node) when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SplitRng, train: bool) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep_scale = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep_scale })
            .collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.requires(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Rows `ids` of `table [N, d]`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = (tt.rows(), tt.last_dim());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Index { index: i, size: n });
            }
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[B*L, H*dh]` to `[B*H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, len: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, width) = (tx.rows(), tx.last_dim());
        if rows % len != 0 || width % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: tx.shape().to_vec(),
                rhs: vec![len, heads],
            });
        }
        let (batch, dh) = (rows / len, width / heads);
        let mut out = vec![0.0; tx.numel()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let (src, dst) = head_index(b, l, h, len, heads);
                    out[dst * dh..(dst + 1) * dh].copy_from_slice(
                        &tx.data()[src * width + h * dh..src * width + (h + 1) * dh],
                    );
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, len, dh], out)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::SplitHeads { x, len, heads }, rg))
    }

    /// `[B*H, L, dh]` back to `[B*L, H*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 3 || !tx.shape()[0].is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: tx.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        let (bh, len, dh) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let batch = bh / heads;
        let width = heads * dh;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let (dst, src) = head_index(b, l, h, len, heads);
                    out[dst * width + h * dh..dst * width + (h + 1) * dh]
                        .copy_from_slice(&tx.data()[src * dh..(src + 1) * dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * len, width], out)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::MergeHeads { x, len, heads }, rg))
    }

    /// Per-row softmax cross-entropy `logsumexp(z) - z[label]`, shape `[N]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let c = tl.last_dim();
        if tl.rows() != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                index: bad,
                size: c,
            });
        }
        let mut probs = tl.data().to_vec();
        softmax_rows(&mut probs, c);
        let out: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = tl.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .collect();
        let out = Tensor::new(vec![labels.len()], out)?;
        let rg = self.requires(logits);
        Ok(self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, labels)?;
        let s = self.sum(rows);
        Ok(self.scale(s, 1.0 / labels.len() as f64))
    }

    /// Row-wise dot products of `a [N,d]` and `b [N,d]`, shape `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_dot", ta, tb));
        }
        let out: Vec<f64> = (0..ta.rows())
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::new(vec![ta.rows()], out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    /// Numerically stable `ln sigmoid(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.min(0.0) - (-v.abs()).exp().ln_1p());
        let rg = self.requires(x);
        self.push(out, Op::LogSigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum_i w_i x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.numel() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: tx.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = tx.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(at) = &self.non_finite {
            return Err(Error::Diverged(format!("non-finite value at {at}")));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    params.push((*id, i));
                    grads[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            self.backprop_node(&node.op, node.value.as_ref().unwrap(), &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                self.acc_with(grads, *a, |da| {
                    // dA = dC op(B)^T
                    gemm(m, n, k, gd, false, tb.data(), !trans_b, da, true);
                });
                self.acc_with(grads, *b, |db| {
                    if *trans_b {
                        // B is [n,k]: dB = dC^T A
                        gemm(n, m, k, gd, true, ta.data(), false, db, true);
                    } else {
                        gemm(k, m, n, ta.data(), true, gd, false, db, true);
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                self.acc_with(grads, *a, |da| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.acc(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(gd).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for ((d, gv), av) in db.iter_mut().zip(gd).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                self.acc(grads, *x, g.clone());
                let n = g.last_dim();
                self.acc_with(grads, *bias, |db| {
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Scale(x, f) => {
                self.acc_with(grads, *x, |dx| {
                    for (d, v) in dx.iter_mut().zip(gd) {
                        *d += f * v;
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.acc_with(grads, *x, |dx| {
                    for ((d, v), xv) in dx.iter_mut().zip(gd).zip(tx.data()) {
                        *d += v * gelu_grad(*xv);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                self.acc_with(grads, *gamma, |dg| {
                    for (i, v) in gd.iter().enumerate() {
                        dg[i % d] += v * xhat[i];
                    }
                });
                self.acc_with(grads, *beta, |db| {
                    for (i, v) in gd.iter().enumerate() {
                        db[i % d] += v;
                    }
                });
                self.acc_with(grads, *x, |dx| {
                    let nd = d as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gr = &gd[span.clone()];
                        let xr = &xhat[span.clone()];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gam[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xr[j];
                        }
                        for (j, o) in dx[span].iter_mut().enumerate() {
                            let dxh = gr[j] * gam[j];
                            *o += is / nd * (nd * dxh - sum_dxhat - xr[j] * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                self.acc_with(grads, *x, |dx| {
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::MaskedFill { x, keep } => {
                self.acc_with(grads, *x, |dx| {
                    for ((d, v), &k) in dx.iter_mut().zip(gd).zip(keep) {
                        if k {
                            *d += v;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc_with(grads, *x, |dx| {
                    for ((d, v), m) in dx.iter_mut().zip(gd).zip(mask) {
                        *d += v * m;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = g.last_dim();
                self.acc_with(grads, *table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, v) in dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&gd[r * d..(r + 1) * d])
                        {
                            *o += v;
                        }
                    }
                });
            }
            Op::SplitHeads { x, len, heads } => {
                let (len, heads) = (*len, *heads);
                let dh = g.last_dim();
                let width = heads * dh;
                let batch = g.shape()[0] / heads;
                self.acc_with(grads, *x, |dx| {
                    for b in 0..batch {
                        for l in 0..len {
                            for h in 0..heads {
                                let (src, dst) = head_index(b, l, h, len, heads);
                                for e in 0..dh {
                                    dx[src * width + h * dh + e] += gd[dst * dh + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, len, heads } => {
                let (len, heads) = (*len, *heads);
                let width = g.last_dim();
                let dh = width / heads;
                let batch = g.rows() / len;
                self.acc_with(grads, *x, |dx| {
                    for b in 0..batch {
                        for l in 0..len {
                            for h in 0..heads {
                                let (dst, src) = head_index(b, l, h, len, heads);
                                for e in 0..dh {
                                    dx[src * dh + e] += gd[dst * width + h * dh + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyRows {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                self.acc_with(grads, *logits, |dl| {
                    for (r, &l) in labels.iter().enumerate() {
                        let gr = gd[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &mut dl[r * c..(r + 1) * c];
                        for (d, p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *d += gr * p;
                        }
                        row[l] -= gr;
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.last_dim();
                self.acc_with(grads, *a, |da| {
                    for (i, o) in da.iter_mut().enumerate() {
                        *o += gd[i / d] * tb.data()[i];
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for (i, o) in db.iter_mut().enumerate() {
                        *o += gd[i / d] * ta.data()[i];
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let tx = self.value(*x);
                self.acc_with(grads, *x, |dx| {
                    for ((d, v), xv) in dx.iter_mut().zip(gd).zip(tx.data()) {
                        *d += v * sigmoid(-xv);
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += s));
            }
            Op::WeightedSum { x, weights } => {
                let s = gd[0];
                self.acc_with(grads, *x, |dx| {
                    for (d, w) in dx.iter_mut().zip(weights) {
                        *d += s * w;
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let g2 = g.clone().reshape(&shape).expect("same numel");
                self.acc(grads, *x, g2);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut ps = store();
        let w = ps.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut g = Graph::new(&ps);
        let wv = g.param(w);
        let s = g.sum(wv);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(wv).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new(&ps);
        let wv = g.param(w);
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(wv).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut ps = store();
        let w = ps.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new(&ps);
            let wv = g.param(w);
            let s = g.sum(wv);
            let grads = g.backward(s).unwrap();
            drop(g);
            grads.accumulate_into(&mut ps);
        }
        assert_eq!(ps.get(w).grad.data(), &[2.0, 2.0]);
        ps.zero_grad();
        assert_eq!(ps.get(w).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.0, 3f64.ln(), 1.0, 1.0]).unwrap());
        let y = g.softmax(x);
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);
        let m = g.masked_fill(x, vec![true, false, true, true]).unwrap();
        let y = g.softmax(m);
        assert_eq!(g.value(y).data()[1], 0.0);
        assert_eq!(g.value(y).data()[0], 1.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let z = g.constant(Tensor::zeros(&[3, 7]));
        let l = g.cross_entropy(z, &[0, 3, 6]).unwrap();
        assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(
            g.cross_entropy(z, &[7, 0, 0]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn layer_norm_of_constant_is_zero_before_affine() {
        let mut ps = store();
        let gam = ps.add("g", Tensor::full(&[4], 3.0));
        let bet = ps.add("b", Tensor::zeros(&[4]));
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::full(&[2, 4], 5.0));
        let (gv, bv) = (g.param(gam), g.param(bet));
        let y = g.layer_norm(x, gv, bv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identity_cases() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let mut rng = SplitRng::new(0);
        let x = g.constant(Tensor::full(&[10], 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true), x);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false), x);
        let y = g.dropout(x, 0.5, &mut rng, true);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn gather_range_and_scatter() {
        let mut ps = store();
        let t = ps.add("t", Tensor::zeros(&[3, 2]));
        let mut g = Graph::new(&ps);
        let tv = g.param(t);
        assert!(matches!(
            g.gather(tv, &[3]),
            Err(Error::Index { index: 3, size: 3 })
        ));
        let r = g.gather(tv, &[1, 1, 2]).unwrap();
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(tv).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]
        );
    }

    #[test]
    fn heads_roundtrip() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::from_fn(&[6, 4], |i| i as f64));
        let s = g.split_heads(x, 3, 2).unwrap();
        assert_eq!(g.value(s).shape(), &[4, 3, 2]);
        // batch 0, head 1, position 0 holds row 0 features 2..4
        assert_eq!(g.value(s).row(3), &[2.0, 3.0]);
        let m = g.merge_heads(s, 2).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]"), "{e}");
    }
}
