//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! evaluation order, so the append order is already a topological order and
//! [`Graph::backward`] simply walks the node list in reverse.
//!
//! ```
//! use eamat_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
        lo: f64,
        hi: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::MulRows(..) => "mul_rows",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Pick(..) => "pick",
            Op::GatherRows { .. } => "gather_rows",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Append-only computation graph, rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; when `requires_grad` is false it is a constant and never accumulates gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a stored parameter as a trainable leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds the gradients held by parameter leaves into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.param_order {
            if let Some(g) = &self.nodes[v.0].grad {
                add_into(store.grad_mut(id).data_mut(), g);
            }
        }
    }

    /// Describes the first node (in evaluation order) holding a non-finite value.
    pub fn first_non_finite(&self, store: Option<&ParamStore>) -> Option<String> {
        let names: HashMap<usize, ParamId> =
            self.param_order.iter().map(|&(id, v)| (v.0, id)).collect();
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                return None;
            }
            let label = match (names.get(&i), store) {
                (Some(&id), Some(s)) => format!("parameter `{}`", s.name(id)),
                _ => format!("node #{i} ({})", n.op.name()),
            };
            Some(format!("{label} with shape {:?}", n.value.shape()))
        })
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    // ---- elementwise ----

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x[.., d] + b[d]`, broadcasting `b` over every leading index.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = tb.numel();
        if tx.shape().last() != Some(&d) {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            add_into(row, tb.data());
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    /// Scalar-per-row broadcast: row `t` of `x` is multiplied by `s[t]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let rows = tx.rows();
        if tx.rank() == 0 || ts.numel() != rows {
            return Err(Error::dim("mul_rows", tx.shape(), ts.shape()));
        }
        let cols = tx.numel() / rows;
        let mut data = tx.data().to_vec();
        for (row, &k) in data.chunks_mut(cols).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::MulRows(x, s), &[x, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    // ---- normalization ----

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim(op, shape, &[axis]));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::softmax_strided(t.data(), &mut out, o * len * inner + i, len, inner);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|k| src[base + k * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..len)
                        .map(|k| (src[base + k * inner] - max).exp())
                        .sum::<f64>()
                        .ln();
                for k in 0..len {
                    out[base + k * inner] = src[base + k * inner] - lse;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Row-wise layer normalization over the last axis, followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| Error::dim("layer_norm", tx.shape(), &[]))?;
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::dim("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gain, bias]))
    }

    // ---- structural ----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::dim("concat", &base_shape, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::dim("slice", t.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = axis_split(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Selects one element (by flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::Input(format!(
                "index {index} out of range for shape {:?}",
                t.shape()
            )));
        }
        let value = Tensor::scalar(t.data()[index]);
        Ok(self.push(value, Op::Pick(x, index), &[x]))
    }

    /// Rows of a rank-2 `table` selected by `indices` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= t.rows()) {
            return Err(Error::Input(format!(
                "gather_rows: indices {indices:?} invalid for table {:?}",
                t.shape()
            )));
        }
        let value = t.permute_rows(indices);
        let op = Op::GatherRows {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant 0/1 `targets`,
    /// with `p` clamped to `[lo, hi]`. Clamped entries pass no gradient.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64], lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() {
            return Err(Error::dim("binary_cross_entropy", t.shape(), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(lo, hi);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce {
            p,
            targets: targets.to_vec(),
            lo,
            hi,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    // ---- backward ----

    /// Propagates `∂loss/∂leaf` into every trainable leaf.
    ///
    /// Leaf gradients accumulate across calls; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed: &mut Vec<f64> = self.nodes[loss.0].grad.get_or_insert_with(|| vec![0.0]);
        seed[0] += 1.0;

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &upstream);
            self.nodes[idx].grad = Some(upstream);
            for (var, g) in contributions {
                let node = &mut self.nodes[var.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt(gy, tb.data(), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn(ta.data(), gy, &mut gb, m, k, n);
                    out.push((*b, gb));
                }
                out
            }
            Op::Transpose(a) => {
                let shape = node.value.shape();
                let g = Tensor::from_parts(shape.to_vec(), gy.to_vec());
                vec![(*a, g.transpose().expect("rank 2").into_data())]
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, gy.iter().zip(vb).map(|(g, x)| g * x).collect()),
                    (*b, gy.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::AddBias(x, b) => {
                let d = self.nodes[b.0].value.numel();
                let mut gb = vec![0.0; d];
                for row in gy.chunks(d) {
                    add_into(&mut gb, row);
                }
                vec![(*x, gy.to_vec()), (*b, gb)]
            }
            Op::MulRows(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let cols = vx.len() / vs.len();
                let mut gx = gy.to_vec();
                let mut gs = vec![0.0; vs.len()];
                for r in 0..vs.len() {
                    let span = r * cols..(r + 1) * cols;
                    gx[span.clone()].iter_mut().for_each(|g| *g *= vs[r]);
                    gs[r] = gy[span.clone()].iter().zip(&vx[span]).map(|(g, v)| g * v).sum();
                }
                vec![(*x, gx), (*s, gs)]
            }
            Op::Scale(a, c) => vec![(*a, gy.iter().map(|g| g * c).collect())],
            Op::Sigmoid(a) => vec![(*a, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())],
            Op::Tanh(a) => vec![(*a, gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect())],
            Op::Relu(a) => {
                let x = val(*a);
                vec![(*a, gy.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|k| gy[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..len {
                            let p = base + k * inner;
                            gx[p] = y[p] * (gy[p] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let total: f64 = (0..len).map(|k| gy[base + k * inner]).sum();
                        for k in 0..len {
                            let p = base + k * inner;
                            gx[p] = gy[p] - y[p].exp() * total;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = val(*gain);
                let d = g.len();
                let mut gx = vec![0.0; y.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gy_r, h_r) = (&gy[span.clone()], &xhat[span.clone()]);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gy_r[j] * g[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h_r[j];
                        ggain[j] += gy_r[j] * h_r[j];
                        gbias[j] += gy_r[j];
                    }
                    let n = d as f64;
                    for j in 0..d {
                        let dh = gy_r[j] * g[j];
                        gx[r * d + j] = inv / n * (n * dh - sum_dh - h_r[j] * sum_dh_h);
                    }
                }
                vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut out = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if needs(v) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            g.extend_from_slice(&gy[from..from + len * inner]);
                        }
                        out.push((v, g));
                    }
                    offset += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.nodes[x.0].value.shape();
                let (outer, full, inner) = axis_split(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    gx[to..to + len * inner].copy_from_slice(&gy[from..from + len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::Sum(x) => vec![(*x, vec![gy[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![gy[0] / n as f64; n])]
            }
            Op::Pick(x, index) => {
                let mut g = vec![0.0; val(*x).len()];
                g[*index] = gy[0];
                vec![(*x, g)]
            }
            Op::GatherRows { table, indices } => {
                let t = &self.nodes[table.0].value;
                let d = t.cols();
                let mut g = vec![0.0; t.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut g[i * d..(i + 1) * d], &gy[r * d..(r + 1) * d]);
                }
                vec![(*table, g)]
            }
            Op::Bce { p, targets, lo, hi } => {
                let n = targets.len() as f64;
                let g = val(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if p < *lo || p > *hi {
                            0.0
                        } else {
                            gy[0] * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                vec![(*p, g)]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
