//! Define-by-run tape with eager forward evaluation and one-sweep backward.
//!
//! Every operation appends a node holding the computed value and the ids of
//! its inputs; inputs therefore always precede outputs, and the backward pass
//! is a single reverse sweep that touches each node exactly once. Gradients
//! accumulate into per-node buffers; leaves created from tensors with
//! `requires_grad == false` (and everything downstream of [`Tape::detach`])
//! are skipped entirely.

use crate::error::{AdError, AdResult};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Transpose { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: S },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId },
    Log { x: NodeId },
    Scale { x: NodeId, c: S },
    GradScale { x: NodeId, c: S },
    Mean { x: NodeId },
    Sum { x: NodeId },
    MeanMany { inputs: Vec<NodeId> },
    SqL2 { a: NodeId, b: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    SliceRows { x: NodeId, start: usize },
    Pick { x: NodeId, idx: usize },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    /// Number of node slots visited by the backward sweep (instrumentation).
    pub nodes_visited: usize,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient buffer for a node, if any reached it.
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient as a dense vector; untouched nodes yield zeros.
    pub fn dense(&self, id: NodeId, numel: usize) -> Vec<S> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); numel],
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held by a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    /// Whether gradients flow into the node.
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Registers a tensor as a leaf; a snapshot of the data is taken, and the
    /// tensor's `requires_grad` flag decides whether gradients are tracked.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        let rg = t.requires_grad();
        self.push(t.clone(), Op::Leaf, rg)
    }

    /// Registers an owned tensor as a constant (no gradient tracking).
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Registers a parameter leaf, overriding the tensor's own flag with
    /// `trainable` — the staging entry point for model parameters.
    pub fn param(&mut self, t: &Tensor<S>, trainable: bool) -> NodeId {
        self.push(t.clone().with_grad(trainable), Op::Leaf, trainable)
    }

    /// Scalar constant node.
    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Stop-gradient: copies the node's value into a fresh constant leaf,
    /// cutting every backward path through it.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.clone().with_grad(false);
        self.push(value, Op::Leaf, false)
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a].requires_grad || self.nodes[b].requires_grad
    }

    // ── Primitive operations ────────────────────────────────────────────

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        if m == 0 || k == 0 || n == 0 {
            return Err(AdError::InvalidShape {
                op: "matmul",
                shape: va.shape().to_vec(),
                reason: "empty dimension".into(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg2(a, b);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(AdError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Adds a `[1,n]` bias row to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> AdResult<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[bias].value);
        let ok = va.shape().len() == 2
            && vb.shape().len() == 2
            && vb.rows() == 1
            && va.cols() == vb.cols();
        if !ok {
            return Err(AdError::ShapeMismatch {
                op: "add_bias",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % n])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg2(a, bias);
        Ok(self.push(value, Op::AddBias { a, bias }, rg))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(AdError::ShapeMismatch {
                op: "multiply",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Concatenates rank-2 tensors along rows (`axis == 0`) or columns
    /// (`axis == 1`).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> AdResult<NodeId> {
        if inputs.is_empty() {
            return Err(AdError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        if axis > 1 {
            return Err(AdError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for rank-2 concat"),
            });
        }
        let first = self.nodes[inputs[0]].value.shape().to_vec();
        if first.len() != 2 {
            return Err(AdError::InvalidShape {
                op: "concat",
                shape: first,
                reason: "rank-2 tensors required".into(),
            });
        }
        let fixed_axis = 1 - axis;
        for &id in inputs {
            let s = self.nodes[id].value.shape();
            if s.len() != 2 || s[fixed_axis] != first[fixed_axis] {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = inputs
            .iter()
            .map(|&id| self.nodes[id].value.shape()[axis])
            .sum();
        let (rows, cols) = if axis == 0 {
            (total, first[1])
        } else {
            (first[0], total)
        };
        let mut data = vec![S::zero(); rows * cols];
        if axis == 0 {
            let mut r0 = 0;
            for &id in inputs {
                let v = &self.nodes[id].value;
                data[r0 * cols..(r0 + v.rows()) * cols].copy_from_slice(v.data());
                r0 += v.rows();
            }
        } else {
            let mut c0 = 0;
            for &id in inputs {
                let v = &self.nodes[id].value;
                let w = v.cols();
                for r in 0..rows {
                    data[r * cols + c0..r * cols + c0 + w]
                        .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
                c0 += w;
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = inputs.iter().any(|&id| self.nodes[id].requires_grad);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: NodeId) -> AdResult<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape().len() != 2 {
            return Err(AdError::InvalidShape {
                op: "transpose",
                shape: v.shape().to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        let (m, n) = (v.rows(), v.cols());
        let mut data = vec![S::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = v.data()[r * n + c];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    fn unary(
        &mut self,
        x: NodeId,
        op: Op<S>,
        f: impl Fn(S) -> S,
    ) -> NodeId {
        let v = &self.nodes[x].value;
        let data = v.data().iter().map(|&e| f(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[x].requires_grad;
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh { x }, |e| e.tanh())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid { x }, |e| {
            S::one() / (S::one() + (-e).exp())
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu { x }, |e| if e > S::zero() { e } else { S::zero() })
    }

    /// Leaky rectifier: `x` for positive inputs, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: NodeId, slope: S) -> NodeId {
        self.unary(x, Op::LeakyRelu { x, slope }, |e| {
            if e > S::zero() {
                e
            } else {
                slope * e
            }
        })
    }

    /// Natural logarithm, elementwise.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log { x }, |e| e.ln())
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        self.unary(x, Op::Scale { x, c }, |e| c * e)
    }

    /// Identity on the forward pass; multiplies the upstream gradient by `c`
    /// on the backward pass. `grad_scale(x, -lambda)` is a gradient-reversal
    /// layer.
    pub fn grad_scale(&mut self, x: NodeId, c: S) -> NodeId {
        self.unary(x, Op::GradScale { x, c }, |e| e)
    }

    /// Softmax over all elements, stabilized by subtracting the maximum
    /// before exponentiation (log-sum-exp trick).
    pub fn softmax(&mut self, x: NodeId) -> AdResult<NodeId> {
        self.softmax_masked(x, None)
    }

    /// Masked softmax: positions with `mask == false` receive exactly zero
    /// probability and the remainder normalizes over unmasked positions.
    pub fn softmax_masked(&mut self, x: NodeId, mask: Option<&[bool]>) -> AdResult<NodeId> {
        let v = &self.nodes[x].value;
        let n = v.numel();
        if n == 0 {
            return Err(AdError::InvalidShape {
                op: "softmax",
                shape: v.shape().to_vec(),
                reason: "empty input".into(),
            });
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(AdError::InvalidArgument {
                    op: "softmax",
                    reason: format!("mask length {} != input length {}", m.len(), n),
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(AdError::InvalidArgument {
                    op: "softmax",
                    reason: "all positions masked".into(),
                });
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let mut max = S::neg_infinity();
        for (i, &e) in v.data().iter().enumerate() {
            if keep(i) && e > max {
                max = e;
            }
        }
        let mut denom = S::zero();
        let mut data = vec![S::zero(); n];
        for (i, &e) in v.data().iter().enumerate() {
            if keep(i) {
                let w = (e - max).exp();
                data[i] = w;
                denom += w;
            }
        }
        for d in data.iter_mut() {
            *d = *d / denom;
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Log-softmax over all elements: `x - logsumexp(x)`, computed stably.
    pub fn log_softmax(&mut self, x: NodeId) -> AdResult<NodeId> {
        let v = &self.nodes[x].value;
        if v.numel() == 0 {
            return Err(AdError::InvalidShape {
                op: "log_softmax",
                shape: v.shape().to_vec(),
                reason: "empty input".into(),
            });
        }
        let max = v
            .data()
            .iter()
            .cloned()
            .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
        let lse = max
            + v.data()
                .iter()
                .map(|&e| (e - max).exp())
                .sum::<S>()
                .ln();
        let data = v.data().iter().map(|&e| e - lse).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::LogSoftmax { x }, rg))
    }

    /// Mean of all elements, producing a scalar node.
    pub fn mean(&mut self, x: NodeId) -> AdResult<NodeId> {
        let v = &self.nodes[x].value;
        if v.numel() == 0 {
            return Err(AdError::InvalidShape {
                op: "mean",
                shape: v.shape().to_vec(),
                reason: "empty input".into(),
            });
        }
        let n = S::c(v.numel() as f64);
        let total = v.data().iter().cloned().sum::<S>();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Tensor::scalar(total / n), Op::Mean { x }, rg))
    }

    /// Sum of all elements, producing a scalar node.
    pub fn sum(&mut self, x: NodeId) -> AdResult<NodeId> {
        let v = &self.nodes[x].value;
        if v.numel() == 0 {
            return Err(AdError::InvalidShape {
                op: "sum",
                shape: v.shape().to_vec(),
                reason: "empty input".into(),
            });
        }
        let total = v.data().iter().cloned().sum::<S>();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, rg))
    }

    /// Mean of several scalar nodes (batch averaging).
    pub fn mean_many(&mut self, inputs: &[NodeId]) -> AdResult<NodeId> {
        if inputs.is_empty() {
            return Err(AdError::InvalidArgument {
                op: "mean_many",
                reason: "no inputs".into(),
            });
        }
        let mut total = S::zero();
        for &id in inputs {
            let v = &self.nodes[id].value;
            if !v.is_scalar() {
                return Err(AdError::InvalidShape {
                    op: "mean_many",
                    shape: v.shape().to_vec(),
                    reason: "scalar inputs required".into(),
                });
            }
            total += v.item();
        }
        let n = S::c(inputs.len() as f64);
        let rg = inputs.iter().any(|&id| self.nodes[id].requires_grad);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::MeanMany {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Squared Euclidean distance `sum((a - b)^2)`, producing a scalar node.
    pub fn squared_l2(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(AdError::ShapeMismatch {
                op: "squared_l2",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let total = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>();
        let rg = self.rg2(a, b);
        Ok(self.push(Tensor::scalar(total), Op::SqL2 { a, b }, rg))
    }

    /// Gathers rows of a `[v, e]` table: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> AdResult<NodeId> {
        let v = &self.nodes[table].value;
        if v.shape().len() != 2 {
            return Err(AdError::InvalidShape {
                op: "gather",
                shape: v.shape().to_vec(),
                reason: "rank-2 table required".into(),
            });
        }
        if ids.is_empty() {
            return Err(AdError::InvalidArgument {
                op: "gather",
                reason: "empty id list".into(),
            });
        }
        let (rows, e) = (v.rows(), v.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AdError::InvalidArgument {
                op: "gather",
                reason: format!("row id {bad} out of range for table with {rows} rows"),
            });
        }
        let mut data = vec![S::zero(); ids.len() * e];
        for (r, &id) in ids.iter().enumerate() {
            data[r * e..(r + 1) * e].copy_from_slice(&v.data()[id * e..(id + 1) * e]);
        }
        let value = Tensor::new(vec![ids.len(), e], data)?;
        let rg = self.nodes[table].requires_grad;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous row slice `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> AdResult<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape().len() != 2 {
            return Err(AdError::InvalidShape {
                op: "slice_rows",
                shape: v.shape().to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        if start >= end || end > v.rows() {
            return Err(AdError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} invalid for {} rows", v.rows()),
            });
        }
        let n = v.cols();
        let data = v.data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Extracts one element (by flat index) as a scalar node.
    pub fn pick(&mut self, x: NodeId, idx: usize) -> AdResult<NodeId> {
        let v = &self.nodes[x].value;
        if idx >= v.numel() {
            return Err(AdError::InvalidArgument {
                op: "pick",
                reason: format!("index {idx} out of range for {} elements", v.numel()),
            });
        }
        let value = Tensor::scalar(v.data()[idx]);
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, Op::Pick { x, idx }, rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Returns per-node gradient
    /// buffers; each node at or below `loss` is visited exactly once.
    pub fn backward(&self, loss: NodeId) -> AdResult<Gradients<S>> {
        let lv = &self.nodes[loss].value;
        if !lv.is_scalar() {
            return Err(AdError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !lv.item().is_finite() {
            return Err(AdError::NonFiniteLoss {
                value: lv.item().to_f64c(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![S::one()]);
        let mut visited = 0usize;
        for i in (0..=loss).rev() {
            visited += 1;
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_op(i, g, lower);
        }
        Ok(Gradients {
            grads,
            nodes_visited: visited,
        })
    }

    /// Propagates the gradient `g` of node `i` into its inputs (all of which
    /// have smaller ids and live in `lower`).
    fn backward_op(&self, i: NodeId, g: &[S], lower: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let need = |j: NodeId| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if need(*a) {
                    let da = acc(lower, *a, m * k);
                    // dA = dOut x B^T
                    for r in 0..m {
                        for j in 0..k {
                            let mut s = S::zero();
                            for l in 0..n {
                                s += g[r * n + l] * vb.data()[j * n + l];
                            }
                            da[r * k + j] += s;
                        }
                    }
                }
                if need(*b) {
                    let db = acc(lower, *b, k * n);
                    // dB = A^T x dOut
                    for j in 0..k {
                        for l in 0..n {
                            let mut s = S::zero();
                            for r in 0..m {
                                s += va.data()[r * k + j] * g[r * n + l];
                            }
                            db[j * n + l] += s;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &j in &[*a, *b] {
                    if need(j) {
                        add_into(acc(lower, j, g.len()), g);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if need(*a) {
                    add_into(acc(lower, *a, g.len()), g);
                }
                if need(*bias) {
                    let n = self.nodes[*bias].value.numel();
                    let db = acc(lower, *bias, n);
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if need(*a) {
                    let da = acc(lower, *a, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        da[idx] += gv * vb.data()[idx];
                    }
                }
                if need(*b) {
                    let db = acc(lower, *b, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx] += gv * va.data()[idx];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_cols = node.value.cols();
                if *axis == 0 {
                    let mut r0 = 0;
                    for &id in inputs {
                        let v = &self.nodes[id].value;
                        let rows = v.rows();
                        if need(id) {
                            let d = acc(lower, id, v.numel());
                            add_into(d, &g[r0 * out_cols..(r0 + rows) * out_cols]);
                        }
                        r0 += rows;
                    }
                } else {
                    let rows = node.value.rows();
                    let mut c0 = 0;
                    for &id in inputs {
                        let v = &self.nodes[id].value;
                        let w = v.cols();
                        if need(id) {
                            let d = acc(lower, id, v.numel());
                            for r in 0..rows {
                                for c in 0..w {
                                    d[r * w + c] += g[r * out_cols + c0 + c];
                                }
                            }
                        }
                        c0 += w;
                    }
                }
            }
            Op::Transpose { x } => {
                if need(*x) {
                    let (n, m) = (node.value.rows(), node.value.cols());
                    let dx = acc(lower, *x, m * n);
                    for r in 0..n {
                        for c in 0..m {
                            dx[c * n + r] += g[r * m + c];
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if need(*x) {
                    let y = node.value.data();
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[idx] += gv * (S::one() - y[idx] * y[idx]);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if need(*x) {
                    let y = node.value.data();
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[idx] += gv * y[idx] * (S::one() - y[idx]);
                    }
                }
            }
            Op::Relu { x } => {
                if need(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        if xv[idx] > S::zero() {
                            dx[idx] += gv;
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if need(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        let d = if xv[idx] > S::zero() { S::one() } else { *slope };
                        dx[idx] += gv * d;
                    }
                }
            }
            Op::Softmax { x } => {
                // Masked entries have y == 0, so the shared formula sends
                // exactly zero gradient into their scores.
                if need(*x) {
                    let y = node.value.data();
                    let dot = y
                        .iter()
                        .zip(g)
                        .map(|(&yi, &gi)| yi * gi)
                        .sum::<S>();
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[idx] += y[idx] * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if need(*x) {
                    let y = node.value.data();
                    let gsum = g.iter().cloned().sum::<S>();
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[idx] += gv - y[idx].exp() * gsum;
                    }
                }
            }
            Op::Log { x } => {
                if need(*x) {
                    let xv = self.nodes[*x].value.data();
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[idx] += gv / xv[idx];
                    }
                }
            }
            Op::Scale { x, c } => {
                if need(*x) {
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[idx] += gv * *c;
                    }
                }
            }
            Op::GradScale { x, c } => {
                if need(*x) {
                    let dx = acc(lower, *x, g.len());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[idx] += gv * *c;
                    }
                }
            }
            Op::Mean { x } => {
                if need(*x) {
                    let n = self.nodes[*x].value.numel();
                    let gv = g[0] / S::c(n as f64);
                    let dx = acc(lower, *x, n);
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Sum { x } => {
                if need(*x) {
                    let n = self.nodes[*x].value.numel();
                    let dx = acc(lower, *x, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanMany { inputs } => {
                let gv = g[0] / S::c(inputs.len() as f64);
                for &id in inputs {
                    if need(id) {
                        acc(lower, id, 1)[0] += gv;
                    }
                }
            }
            Op::SqL2 { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let two = S::c(2.0);
                if need(*a) {
                    let da = acc(lower, *a, va.numel());
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d += two * g[0] * (va.data()[idx] - vb.data()[idx]);
                    }
                }
                if need(*b) {
                    let db = acc(lower, *b, vb.numel());
                    for (idx, d) in db.iter_mut().enumerate() {
                        *d -= two * g[0] * (va.data()[idx] - vb.data()[idx]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if need(*table) {
                    let v = &self.nodes[*table].value;
                    let e = v.cols();
                    let dt = acc(lower, *table, v.numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..e {
                            dt[id * e + c] += g[r * e + c];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if need(*x) {
                    let v = &self.nodes[*x].value;
                    let n = v.cols();
                    let dx = acc(lower, *x, v.numel());
                    for (idx, &gv) in g.iter().enumerate() {
                        dx[start * n + idx] += gv;
                    }
                }
            }
            Op::Pick { x, idx } => {
                if need(*x) {
                    let n = self.nodes[*x].value.numel();
                    acc(lower, *x, n)[*idx] += g[0];
                }
            }
        }
    }
}

/// Fetches (allocating on first touch) the gradient buffer for node `j`.
fn acc<S: Scalar>(lower: &mut [Option<Vec<S>>], j: NodeId, numel: usize) -> &mut Vec<S> {
    lower[j].get_or_insert_with(|| vec![S::zero(); numel])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-major matrix product accumulated into `out` (assumed zeroed).
fn matmul_into<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for r in 0..m {
        for j in 0..k {
            let av = a[r * k + j];
            if av == S::zero() {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
