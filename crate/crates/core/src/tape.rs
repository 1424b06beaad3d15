//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed through it as a node holding
//! the forward value. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid reverse topological order because a node can only
//! refer to nodes created before it. A fresh tape is built for every forward
//! pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, log_sum_exp, sigmoid, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
}

/// Running mean / variance of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn identity(width: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Which statistics a batch-norm node normalizes with.
pub enum BatchNormMode<'a> {
    /// Batch statistics; the running statistics are updated in place.
    Train(&'a mut BatchNormStats),
    /// Running statistics only.
    Infer(&'a BatchNormStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var, cols: usize },
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { parts: Vec<Var>, outer: usize, chunks: Vec<usize> },
    SliceCols { a: Var, start: usize, cols: usize },
    SliceRows { a: Var, offset: usize },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    grad_enabled: bool,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are reported only for leaves with
    /// `grad_enabled`.
    pub fn leaf(&mut self, value: Tensor, grad_enabled: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            grad_enabled,
            needs_grad: grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            grad_enabled: false,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::shape(op, shape, &[0, 0]));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_t", a)?;
        let (n, k2) = self.matrix_dims("matmul_t", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMulT { a, b, m, k, n }, &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.matrix_dims("add_row", a)?;
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { a, bias, cols }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.map(a, |x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[factor.len()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&factor)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(a, factor), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, libm::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    /// Dispatches unary kinds on `operands[0]` and binary kinds on the first two.
    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Sigmoid | Elementwise::Tanh | Elementwise::Relu => 1,
            Elementwise::Add | Elementwise::Mul => 2,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Sigmoid => Ok(self.sigmoid(operands[0])),
            Elementwise::Tanh => Ok(self.tanh(operands[0])),
            Elementwise::Relu => Ok(self.relu(operands[0])),
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
        }
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut axis_len = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            axis_len += s[axis];
            chunks.push(s[axis] * inner);
        }
        let total: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &chunk) in parts.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            parts,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::matrix(rows, len, data)?;
        Ok(self.push(value, Op::SliceCols { a, start, cols }, &[a]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_rows", a)?;
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::matrix(len, cols, data)?;
        Ok(self.push(
            value,
            Op::SliceRows {
                a,
                offset: start * cols,
            },
            &[a],
        ))
    }

    /// Rows `ids` of a `V×n` table, as an `ids.len()×n` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather", table)?;
        if ids.is_empty() {
            return Err(Error::Contract("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(self.value(table).row_slice(id));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
            &[table],
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so that
    /// inference is the identity. Returns `x` itself when inactive.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Per-column batch normalization of a `batch×d` matrix with affine
    /// parameters `gamma`, `beta` (length `d`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("batch_norm", x)?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let (mean, inv_std, batch_stats) = match mode {
            BatchNormMode::Train(stats) => {
                if rows < 2 {
                    return Err(Error::Contract(
                        "training-mode batch norm needs at least 2 rows".into(),
                    ));
                }
                if stats.width() != cols {
                    return Err(Error::shape("batch_norm", &[cols], &[stats.width()]));
                }
                let n = rows as f64;
                let mut mean = vec![0.0; cols];
                for row in xs.chunks(cols) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; cols];
                for row in xs.chunks(cols) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                for j in 0..cols {
                    stats.mean[j] = (1.0 - BN_MOMENTUM) * stats.mean[j] + BN_MOMENTUM * mean[j];
                    let unbiased = var[j] * n / (n - 1.0);
                    stats.var[j] = (1.0 - BN_MOMENTUM) * stats.var[j] + BN_MOMENTUM * unbiased;
                }
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
                (mean, inv_std, true)
            }
            BatchNormMode::Infer(stats) => {
                if stats.width() != cols {
                    return Err(Error::shape("batch_norm", &[cols], &[stats.width()]));
                }
                let inv_std: Vec<f64> = stats.var.iter().map(|&v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xs.chunks(cols) {
            for j in 0..cols {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: batch×V`. Rows whose target is `None` are not scored.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(rows * cols);
        for (row, target) in self.value(logits).data().chunks(cols).zip(targets) {
            let lse = log_sum_exp(row);
            probs.extend(row.iter().map(|&l| libm::exp(l - lse)));
            if let Some(t) = *target {
                if t >= cols {
                    return Err(Error::Index {
                        what: "target",
                        index: t,
                        bound: cols,
                    });
                }
                loss += lse - row[t];
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let wrapped: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        let total = self.cross_entropy_sum(logits, &wrapped)?;
        Ok(self.scale(total, 1.0 / targets.len() as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Populates gradients of the scalar `loss` for every node it depends on.
    ///
    /// Previously computed gradients are discarded. Afterwards every
    /// `grad_enabled` leaf has a gradient, zero when `loss` does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            propagate(before, node, g);
        }
        for node in &mut self.nodes {
            if node.grad_enabled && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }
}

fn grad_slot(nodes: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
}

fn accumulate(nodes: &mut [Node], v: Var, contribution: impl Fn(usize) -> f64) {
    if let Some(slot) = grad_slot(nodes, v) {
        for (i, s) in slot.iter_mut().enumerate() {
            *s += contribution(i);
        }
    }
}

fn propagate(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if nodes[a.0].needs_grad {
                let bv = nodes[b.0].value.data().to_vec();
                let slot = grad_slot(nodes, a).unwrap();
                gemm_nt(m, n, k, g, &bv, slot);
            }
            if nodes[b.0].needs_grad {
                let av = nodes[a.0].value.data().to_vec();
                let slot = grad_slot(nodes, b).unwrap();
                gemm_tn(m, k, n, &av, g, slot);
            }
        }
        &Op::MatMulT { a, b, m, k, n } => {
            // out = a bᵀ: da = g b, db = gᵀ a
            if nodes[a.0].needs_grad {
                let bv = nodes[b.0].value.data().to_vec();
                let slot = grad_slot(nodes, a).unwrap();
                gemm_nn(m, n, k, g, &bv, slot);
            }
            if nodes[b.0].needs_grad {
                let av = nodes[a.0].value.data().to_vec();
                let slot = grad_slot(nodes, b).unwrap();
                gemm_tn(m, n, k, g, &av, slot);
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, a, |i| g[i]);
            accumulate(nodes, b, |i| g[i]);
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, a, |i| g[i]);
            accumulate(nodes, b, |i| -g[i]);
        }
        &Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            accumulate(nodes, a, |i| g[i] * bv[i]);
            accumulate(nodes, b, |i| g[i] * av[i]);
        }
        &Op::AddRow { a, bias, cols } => {
            accumulate(nodes, a, |i| g[i]);
            if let Some(slot) = grad_slot(nodes, bias) {
                for row in g.chunks(cols) {
                    for (s, &x) in slot.iter_mut().zip(row) {
                        *s += x;
                    }
                }
            }
        }
        &Op::Scale(a, factor) => accumulate(nodes, a, |i| g[i] * factor),
        Op::MulConst(a, factor) => accumulate(nodes, *a, |i| g[i] * factor[i]),
        &Op::Sigmoid(a) => accumulate(nodes, a, |i| g[i] * out[i] * (1.0 - out[i])),
        &Op::Tanh(a) => accumulate(nodes, a, |i| g[i] * (1.0 - out[i] * out[i])),
        &Op::Relu(a) => {
            let av = nodes[a.0].value.data().to_vec();
            accumulate(nodes, a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Concat { parts, outer, chunks } => {
            let total: usize = chunks.iter().sum();
            let mut offset = 0;
            for (&p, &chunk) in parts.iter().zip(chunks) {
                if let Some(slot) = grad_slot(nodes, p) {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (s, &x) in slot[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *s += x;
                        }
                    }
                }
                offset += chunk;
            }
        }
        &Op::SliceCols { a, start, cols } => {
            if let Some(slot) = grad_slot(nodes, a) {
                let len = g.len() / (slot.len() / cols);
                for (dst, src) in slot.chunks_mut(cols).zip(g.chunks(len)) {
                    for (s, &x) in dst[start..start + len].iter_mut().zip(src) {
                        *s += x;
                    }
                }
            }
        }
        &Op::SliceRows { a, offset } => {
            if let Some(slot) = grad_slot(nodes, a) {
                for (s, &x) in slot[offset..offset + g.len()].iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
        Op::Gather { table, ids, cols } => {
            if let Some(slot) = grad_slot(nodes, *table) {
                for (&id, src) in ids.iter().zip(g.chunks(*cols)) {
                    for (s, &x) in slot[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                        *s += x;
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let cols = inv_std.len();
            let rows = xhat.len() / cols;
            let gv = nodes[gamma.0].value.data().to_vec();
            if let Some(slot) = grad_slot(nodes, *gamma) {
                for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        slot[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(slot) = grad_slot(nodes, *beta) {
                for gr in g.chunks(cols) {
                    for j in 0..cols {
                        slot[j] += gr[j];
                    }
                }
            }
            if let Some(slot) = grad_slot(nodes, *x) {
                if *batch_stats {
                    let n = rows as f64;
                    let mut sum_d = vec![0.0; cols];
                    let mut sum_dh = vec![0.0; cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            sum_d[j] += d;
                            sum_dh[j] += d * hr[j];
                        }
                    }
                    for r in 0..rows {
                        for j in 0..cols {
                            let idx = r * cols + j;
                            let d = g[idx] * gv[j];
                            slot[idx] +=
                                inv_std[j] / n * (n * d - sum_d[j] - xhat[idx] * sum_dh[j]);
                        }
                    }
                } else {
                    for (idx, s) in slot.iter_mut().enumerate() {
                        let j = idx % cols;
                        *s += g[idx] * gv[j] * inv_std[j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if let Some(slot) = grad_slot(nodes, *logits) {
                let cols = probs.len() / targets.len();
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for j in 0..cols {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        slot[r * cols + j] += g[0] * (probs[r * cols + j] - onehot);
                    }
                }
            }
        }
        &Op::Sum(a) => accumulate(nodes, a, |_| g[0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap(), true)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let eye = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = leaf(&mut t, &[2, 1], &[3.0, 7.0]);
        let out = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 7.0]);
        let a = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = leaf(&mut t, &[2, 1], &[1.0, 1.0]);
        let out = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 7.0]);
        match t.matmul(ones, a) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 1]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_definitions() {
        let mut t = Tape::new();
        let z = leaf(&mut t, &[1], &[0.0]);
        let s = t.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
        let x = leaf(&mut t, &[2], &[-3.2, 3.2]);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 3.2]);
        let y = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        assert!(t.add(x, y).is_err());
        assert!(t.elementwise(Elementwise::Add, &[x]).is_err());
    }

    #[test]
    fn concat_definitions() {
        let mut t = Tape::new();
        let v = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let c = t.concat(&[v], 0).unwrap();
        assert_eq!(t.value(c), t.value(v));
        let a = leaf(&mut t, &[2], &[1.0, 2.0]);
        let c = t.concat(&[a, v], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 1.0, 2.0, 3.0]);
        let m = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let n = leaf(&mut t, &[3, 2], &[0.0; 6]);
        assert!(t.concat(&[m, n], 1).is_err());
        let rows = t.concat(&[m, n], 0).unwrap();
        assert_eq!(t.shape(rows), &[5, 2]);
    }

    #[test]
    fn concat_backward_routes_slices() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut t, &[2, 1], &[5.0, 6.0]);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let w = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(t.grad(b).unwrap(), &[3.0, 6.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(t.dropout(x, 1.0, true, &mut rng), Err(Error::Param(_))));
        assert!(t.dropout(x, -0.1, true, &mut rng).is_err());

        let ones = t.constant(Tensor::full(&[100_000], 1.0));
        let d = t.dropout(ones, 0.5, true, &mut rng).unwrap();
        let vals = t.value(d).data();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn batch_norm_training_normalizes_columns() {
        let mut t = Tape::new();
        let data = [1.0, -4.0, 10.0, 2.5, 3.0, -7.0, 0.5, 8.0, 2.0, -1.0, 6.0, 4.0];
        let x = leaf(&mut t, &[4, 3], &data);
        let gamma = leaf(&mut t, &[3], &[1.0; 3]);
        let beta = leaf(&mut t, &[3], &[0.0; 3]);
        let mut stats = BatchNormStats::identity(3);
        let y = t
            .batch_norm(x, gamma, beta, BatchNormMode::Train(&mut stats))
            .unwrap();
        let out = t.value(y).data();
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|r| data[r * 3 + j]).collect();
            let mu = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            let ys: Vec<f64> = (0..4).map(|r| out[r * 3 + j]).collect();
            let m = ys.iter().sum::<f64>() / 4.0;
            let v = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9);
            // unit variance up to the epsilon in the denominator
            assert!((v - var / (var + BN_EPS)).abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-5);
            assert!((stats.mean[j] - 0.1 * mu).abs() < 1e-12);
            assert!((stats.var[j] - (0.9 + 0.1 * var * 4.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_contracts() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 3], &[1.0, 2.0, 3.0]);
        let gamma = leaf(&mut t, &[3], &[1.0; 3]);
        let beta = leaf(&mut t, &[3], &[0.0; 3]);
        let mut stats = BatchNormStats::identity(3);
        assert!(t
            .batch_norm(x, gamma, beta, BatchNormMode::Train(&mut stats))
            .is_err());
        let y = t
            .batch_norm(x, gamma, beta, BatchNormMode::Infer(&stats))
            .unwrap();
        for (a, b) in t.value(y).data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-4 * b);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let uniform = leaf(&mut t, &[1, 7], &[0.3; 7]);
        let l = t.softmax_cross_entropy(uniform, &[4]).unwrap();
        assert!((t.value(l).data()[0] - 1.945_910_149_055_313_2).abs() < 1e-12);
        let mut peaked = [0.0; 5];
        peaked[2] = 50.0;
        let p = leaf(&mut t, &[1, 5], &peaked);
        let l = t.softmax_cross_entropy(p, &[2]).unwrap();
        assert!(t.value(l).data()[0] < 1e-9);
        assert!(matches!(
            t.softmax_cross_entropy(p, &[5]),
            Err(Error::Index { index: 5, bound: 5, .. })
        ));
    }

    #[test]
    fn backward_square_and_constant() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let y = leaf(&mut t, &[2], &[5.0, 6.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(t.grad(y).unwrap(), &[0.0, 0.0]);
        assert!(matches!(t.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.5, -2.0]);
        let a = t.scale(x, 3.0);
        let b = t.tanh(x);
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        for (gi, xi) in g.iter().zip([1.5f64, -2.0]) {
            let th = libm::tanh(xi);
            assert!((gi - (3.0 + 1.0 - th * th)).abs() < 1e-15);
        }
    }
}
