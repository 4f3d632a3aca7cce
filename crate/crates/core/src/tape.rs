//! Reverse-mode autodiff over a closed primitive set.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; every
//! node's inputs precede it, so a single reverse sweep yields exact gradients
//! for all named parameter leaves. Each op validates shapes and rejects
//! non-finite outputs instead of letting NaNs propagate.

use std::collections::BTreeMap;

use crate::error::{EcupError, Result};
use crate::tensor::{
    broadcast_zip, matmul, matmul_batching, matmul_nt, matmul_tn_acc, matmul_tn_batched,
    matmul_tn_shared_rhs, reduce_to_shape, MatmulBatch, Tensor,
};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    Lookup { table: Var, indices: Vec<usize> },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Scale { x: Var, c: f64 },
    SliceLast { x: Var, start: usize },
    StopGradient,
    BceLogits { logits: Var, labels: Var },
    BceProbs { probs: Var, labels: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Extracts a single-element value.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(EcupError::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.values()[0])
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(EcupError::NonFinite(what.to_string()));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: no gradient is ever tracked for it.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf { param: None }, value, false, "input")
    }

    /// Named trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            value,
            true,
            name,
        )
    }

    /// Row gather from an embedding table.
    pub fn lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(EcupError::ShapeMismatch(format!(
                "lookup table must be rank 2, got {:?}",
                t.shape()
            )));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut values = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= rows {
                return Err(EcupError::ShapeMismatch(format!(
                    "lookup index {} out of range for table with {} rows",
                    ix, rows
                )));
            }
            values.extend_from_slice(&t.values()[ix * d..(ix + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], values)?;
        let rg = self.rg(table);
        self.push(
            Op::Lookup {
                table,
                indices: indices.to_vec(),
            },
            value,
            rg,
            "lookup",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul { a, b }, value, rg, "matmul")
    }

    /// `a . b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNT { a, b }, value, rg, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add { a, b }, value, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub { a, b }, value, rg, "sub")
    }

    /// Element-wise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul { a, b }, value, rg, "mul")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(Op::Relu { x }, value, rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(x);
        self.push(Op::Sigmoid { x }, value, rg, "sigmoid")
    }

    /// Softmax over the last axis, computed with the max-shift for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 1 {
            return Err(EcupError::ShapeMismatch("softmax needs rank >= 1".into()));
        }
        let n = *t.shape().last().unwrap();
        let mut values = Vec::with_capacity(t.numel());
        for row in t.values().chunks(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            values.extend(exps.iter().map(|e| e / z));
        }
        let value = Tensor::new(t.shape().to_vec(), values)?;
        let rg = self.rg(x);
        self.push(Op::Softmax { x }, value, rg, "softmax")
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(EcupError::ShapeMismatch("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(EcupError::ShapeMismatch(format!(
                "concat axis {} out of range for rank {}",
                axis, rank
            )));
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(EcupError::ShapeMismatch(format!(
                    "concat shapes {:?} vs {:?} differ off axis {}",
                    first, s, axis
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut values = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for &v in inputs {
            let t = self.value(v);
            let span = t.shape()[axis] * inner;
            for o in 0..outer {
                let src = &t.values()[o * span..(o + 1) * span];
                let dst_start = o * axis_total * inner + offset;
                values[dst_start..dst_start + span].copy_from_slice(src);
            }
            offset += span;
        }
        let value = Tensor::new(out_shape, values)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
            "concat",
        )
    }

    /// Row-major reinterpretation; element count must match.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(Op::Reshape { x }, value, rg, "reshape")
    }

    /// Flattens all axes after the first into one.
    pub fn flatten_trailing(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() {
            return Err(EcupError::ShapeMismatch("flatten of rank-0".into()));
        }
        let lead = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, vec![lead, rest])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, value, rg, "scale")
    }

    /// Contiguous slice `[start, start+len)` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| {
            EcupError::ShapeMismatch("slice_last of rank-0".into())
        })?;
        if start + len > n {
            return Err(EcupError::ShapeMismatch(format!(
                "slice [{}, {}) out of range for last dim {}",
                start,
                start + len,
                n
            )));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut values = Vec::with_capacity(t.numel() / n * len);
        for row in t.values().chunks(n) {
            values.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(shape, values)?;
        let rg = self.rg(x);
        self.push(Op::SliceLast { x, start }, value, rg, "slice_last")
    }

    /// Identity forward; gradients do not propagate past it.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, value, false, "stop_gradient")
    }

    /// Numerically stable per-element binary cross-entropy from logits.
    pub fn bce_logits(&mut self, logits: Var, labels: Var) -> Result<Var> {
        let l = self.value(logits);
        let y = self.value(labels);
        if l.shape() != y.shape() {
            return Err(EcupError::ShapeMismatch(format!(
                "bce_logits shapes {:?} vs {:?}",
                l.shape(),
                y.shape()
            )));
        }
        let values = l
            .values()
            .iter()
            .zip(y.values())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(l.shape().to_vec(), values)?;
        let rg = self.rg(logits);
        self.push(Op::BceLogits { logits, labels }, value, rg, "bce_logits")
    }

    /// Per-element binary cross-entropy on probabilities, clamped to
    /// `[1e-12, 1 - 1e-12]`; used where the prediction is a product of
    /// probabilities rather than a single sigmoid.
    pub fn bce_probs(&mut self, probs: Var, labels: Var) -> Result<Var> {
        let p = self.value(probs);
        let y = self.value(labels);
        if p.shape() != y.shape() {
            return Err(EcupError::ShapeMismatch(format!(
                "bce_probs shapes {:?} vs {:?}",
                p.shape(),
                y.shape()
            )));
        }
        let values = p
            .values()
            .iter()
            .zip(y.values())
            .map(|(&q, &t)| {
                let q = clamp_prob(q);
                -t * q.ln() - (1.0 - t) * (1.0 - q).ln()
            })
            .collect();
        let value = Tensor::new(p.shape().to_vec(), values)?;
        let rg = self.rg(probs);
        self.push(Op::BceProbs { probs, labels }, value, rg, "bce_probs")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).values().iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), rg, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(EcupError::ShapeMismatch("mean of empty tensor".into()));
        }
        let s: f64 = t.values().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s), rg, "mean_all")
    }

    // -- composites -----------------------------------------------------

    /// `x . w + b` with the bias broadcast over leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Sum of squared entries as a scalar, used for the L2 regularizer.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum_all(sq)
    }

    // -- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns one gradient per named
    /// parameter leaf on the tape; leaves reachable only through
    /// `stop_gradient` (or not at all) get explicit zeros.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(EcupError::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &grad, &mut grads)?;
            if let Op::Leaf { param: Some(_) } = &self.nodes[i].op {
                grads[i] = Some(grad);
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                if !g.is_finite() {
                    return Err(EcupError::NonFinite(format!("gradient of {}", name)));
                }
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.values_mut().iter_mut().zip(delta.values()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::StopGradient => {}
            Op::Lookup { table, indices } => {
                let tshape = self.value(*table).shape().to_vec();
                let d = tshape[1];
                let mut dt = Tensor::zeros(tshape);
                for (r, &ix) in indices.iter().enumerate() {
                    let src = &grad.values()[r * d..(r + 1) * d];
                    let dst = &mut dt.values_mut()[ix * d..(ix + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let batching = matmul_batching(ta, tb)?;
                let (_, m, k) = ta.as_matrices()?;
                let (_, _, n) = tb.as_matrices()?;
                if self.rg(*a) {
                    // dA = dC . B^T, reduced onto A's shape when A is shared.
                    let da = matmul_nt(grad, tb)?;
                    self.accumulate(grads, *a, reduce_to_shape(&da, ta.shape()));
                }
                if self.rg(*b) {
                    let db = match batching {
                        MatmulBatch::Flat => Tensor::new(
                            vec![k, n],
                            matmul_tn_acc(1, m, k, n, ta.values(), grad.values()),
                        )?,
                        MatmulBatch::LeftBatched(nb) => Tensor::new(
                            vec![k, n],
                            matmul_tn_acc(nb, m, k, n, ta.values(), grad.values()),
                        )?,
                        MatmulBatch::RightBatched(nb) => {
                            let mut shape = tb.shape().to_vec();
                            let l = shape.len();
                            shape[l - 2] = k;
                            shape[l - 1] = n;
                            Tensor::new(
                                shape,
                                matmul_tn_shared_rhs(nb, m, k, n, grad.values(), ta.values(), true),
                            )?
                        }
                        MatmulBatch::BothBatched(nb) => {
                            let mut shape = tb.shape().to_vec();
                            let l = shape.len();
                            shape[l - 2] = k;
                            shape[l - 1] = n;
                            Tensor::new(
                                shape,
                                matmul_tn_batched(nb, m, k, n, ta.values(), grad.values()),
                            )?
                        }
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNT { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let batching = matmul_batching(ta, tb)?;
                let (_, m, _k) = ta.as_matrices()?;
                let (_, n, k) = tb.as_matrices()?;
                if self.rg(*a) {
                    // dA = dC . B
                    let da = matmul(grad, tb)?;
                    self.accumulate(grads, *a, reduce_to_shape(&da, ta.shape()));
                }
                if self.rg(*b) {
                    // dB = dC^T . A
                    let db = match batching {
                        MatmulBatch::Flat => Tensor::new(
                            vec![n, k],
                            matmul_tn_acc(1, m, n, k, grad.values(), ta.values()),
                        )?,
                        MatmulBatch::LeftBatched(nb) => Tensor::new(
                            vec![n, k],
                            matmul_tn_acc(nb, m, n, k, grad.values(), ta.values()),
                        )?,
                        MatmulBatch::RightBatched(nb) => {
                            let mut shape = tb.shape().to_vec();
                            let l = shape.len();
                            shape[l - 2] = n;
                            shape[l - 1] = k;
                            Tensor::new(
                                shape,
                                matmul_tn_shared_rhs(nb, m, n, k, grad.values(), ta.values(), false),
                            )?
                        }
                        MatmulBatch::BothBatched(nb) => {
                            let mut shape = tb.shape().to_vec();
                            let l = shape.len();
                            shape[l - 2] = n;
                            shape[l - 1] = k;
                            Tensor::new(
                                shape,
                                matmul_tn_batched(nb, m, n, k, grad.values(), ta.values()),
                            )?
                        }
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(grad, self.value(*a).shape()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, reduce_to_shape(grad, self.value(*b).shape()));
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(grad, self.value(*a).shape()));
                }
                if self.rg(*b) {
                    let neg = grad.map(|v| -v);
                    self.accumulate(grads, *b, reduce_to_shape(&neg, self.value(*b).shape()));
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let da = broadcast_zip(grad, self.value(*b), |g, y| g * y)?;
                    self.accumulate(grads, *a, reduce_to_shape(&da, self.value(*a).shape()));
                }
                if self.rg(*b) {
                    let db = broadcast_zip(grad, self.value(*a), |g, x| g * x)?;
                    self.accumulate(grads, *b, reduce_to_shape(&db, self.value(*b).shape()));
                }
            }
            Op::Relu { x } => {
                let dx = broadcast_zip(grad, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = broadcast_zip(grad, &self.nodes[i].value, |g, s| g * s * (1.0 - s))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for (row, (yv, gv)) in y
                    .values()
                    .chunks(n)
                    .zip(grad.values().chunks(n))
                    .enumerate()
                {
                    let dot: f64 = yv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
                    let dst = &mut dx.values_mut()[row * n..(row + 1) * n];
                    for ((d, &yi), &gi) in dst.iter_mut().zip(yv).zip(gv) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for &v in inputs {
                    let s = self.value(v).shape().to_vec();
                    let span = s[*axis] * inner;
                    if self.rg(v) {
                        let mut dv = Tensor::zeros(s);
                        for o in 0..outer {
                            let src_start = o * axis_total * inner + offset;
                            dv.values_mut()[o * span..(o + 1) * span]
                                .copy_from_slice(&grad.values()[src_start..src_start + span]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += span;
                }
            }
            Op::Reshape { x } => {
                let dx = grad.reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, grad.map(|g| g * c));
            }
            Op::SliceLast { x, start } => {
                let xs = self.value(*x).shape().to_vec();
                let n = *xs.last().unwrap();
                let len = *self.nodes[i].value.shape().last().unwrap();
                let mut dx = Tensor::zeros(xs);
                for (row, g) in grad.values().chunks(len).enumerate() {
                    dx.values_mut()[row * n + start..row * n + start + len].copy_from_slice(g);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BceLogits { logits, labels } => {
                let dl = broadcast_zip(self.value(*logits), self.value(*labels), |z, t| {
                    sigmoid_scalar(z) - t
                })?;
                let dl = broadcast_zip(&dl, grad, |d, g| d * g)?;
                self.accumulate(grads, *logits, dl);
            }
            Op::BceProbs { probs, labels } => {
                let dp = broadcast_zip(self.value(*probs), self.value(*labels), |q, t| {
                    // Flat (zero-gradient) outside the clamp range.
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
                        0.0
                    } else {
                        -t / q + (1.0 - t) / (1.0 - q)
                    }
                })?;
                let dp = broadcast_zip(&dp, grad, |d, g| d * g)?;
                self.accumulate(grads, *probs, dp);
            }
            Op::SumAll { x } => {
                let g = grad.values()[0];
                self.accumulate(
                    grads,
                    *x,
                    Tensor::full(self.value(*x).shape().to_vec(), g),
                );
            }
            Op::MeanAll { x } => {
                let t = self.value(*x);
                let g = grad.values()[0] / t.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(t.shape().to_vec(), g));
            }
        }
        Ok(())
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_softmax_relu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[0.0, -3.2, 3.2])).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).values()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 3.2]);

        let a = tape.input(t(&[2], &[1.7, 1.7])).unwrap();
        let sm = tape.softmax(a).unwrap();
        assert_eq!(tape.value(sm).values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .input(t(&[2, 3], &[10.0, -4.0, 0.3, 2.0, 2.0, -100.0]))
            .unwrap();
        let sm = tape.softmax(x).unwrap();
        for row in tape.value(sm).values().chunks(3) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param("w", t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 9.0])).unwrap();
        let s = tape.sum_all(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["w"].values(), &[1.0; 6]);
    }

    #[test]
    fn stop_gradient_blocks_flow_and_reports_zero() {
        let mut tape = Tape::new();
        let w = tape.param("w", t(&[2], &[1.0, 2.0])).unwrap();
        let frozen = tape.stop_gradient(w).unwrap();
        let s = tape.sum_squares(frozen).unwrap();
        assert_eq!(tape.scalar(s).unwrap(), 5.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["w"].values(), &[0.0, 0.0]);
    }

    #[test]
    fn mul_broadcast_gradients_reduce_correctly() {
        // (2,3,2) * (2,1,2): gradient for the broadcast side sums over axis 1.
        let mut tape = Tape::new();
        let a = tape.input(Tensor::full(vec![2, 3, 2], 2.0)).unwrap();
        let b = tape.param("b", Tensor::full(vec![2, 1, 2], 3.0)).unwrap();
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        assert_eq!(tape.scalar(s).unwrap(), 2.0 * 3.0 * 12.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["b"].values(), &[6.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn lookup_accumulates_duplicate_rows() {
        let mut tape = Tape::new();
        let table = tape
            .param("e", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let rows = tape.lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).values(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum_all(rows).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["e"].values(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        // sigmoid(0) = 0.5 against label 1: -ln 0.5 = ln 2.
        let l = tape.input(t(&[1], &[0.0])).unwrap();
        let y = tape.input(t(&[1], &[1.0])).unwrap();
        let b = tape.bce_logits(l, y).unwrap();
        assert_relative_eq!(tape.value(b).values()[0], std::f64::consts::LN_2);

        let p = tape.input(t(&[1], &[0.25])).unwrap();
        let b2 = tape.bce_probs(p, y).unwrap();
        assert_relative_eq!(tape.value(b2).values()[0], 2.0 * std::f64::consts::LN_2);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.input(t(&[1], &[f64::NAN])),
            Err(EcupError::NonFinite(_))
        ));
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.param("a", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.param("b", t(&[2, 1], &[5.0, 6.0])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let right = tape.slice_last(c, 2, 1).unwrap();
        let s = tape.sum_all(right).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads["a"].values(), &[0.0; 4]);
        assert_eq!(grads["b"].values(), &[1.0, 1.0]);
    }
}
