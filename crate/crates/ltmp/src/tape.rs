//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! The tape is eager: every builder computes its forward value immediately
//! and appends a node, so inputs always have smaller ids than the nodes that
//! consume them and a single reverse sweep implements backprop. Gradients
//! are only materialised along paths that reach a [`Op::Param`] leaf
//! (`needs_grad` propagates forward at build time), which is what makes the
//! threshold-only training phase cheap: frozen backbone weights enter as
//! [`Op::Input`] constants and their weight gradients are never formed.
//!
//! Two mask conventions live here:
//!
//! * [`MaskMode::Hard`] — [`Tape::threshold_mask`] emits exact `{0, 1}`
//!   decisions (`1` iff `score > theta`). The backward pass still uses the
//!   sigmoid surrogate `d mask / d theta = -sigma'((s - theta)/tau) / tau`,
//!   i.e. the straight-through estimator.
//! * [`MaskMode::Relaxed`] — the forward value itself is the sigmoid
//!   `sigma((s - theta)/tau)`, making the whole graph differentiable so
//!   finite differences can validate every gradient in one sweep.
//!
//! Both the hard and relaxed vectors are recorded on the node so diagnostics
//! can inspect the decision margin regardless of mode.

use crate::tensor::{cross_entropy, gelu_prime, Tensor, TensorError, LAYER_NORM_EPS};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid graph construction: {0}")]
    Build(String),
}

/// Forward-value convention for threshold masks; see the module docs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Hard,
    Relaxed,
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Constant leaf; no gradient.
    Input,
    /// Trainable leaf, keyed by caller-assigned slot.
    Param { slot: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product of same-shape tensors.
    Mul(NodeId, NodeId),
    /// Elementwise quotient of same-shape tensors.
    Div(NodeId, NodeId),
    /// Multiplication by a compile-time constant.
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// `[m,k] x [k,n]`.
    MatMul(NodeId, NodeId),
    /// `[m,k] x [n,k]^T`.
    MatMulNT(NodeId, NodeId),
    /// `[m,n] + [n]`, broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// Row `i` of `[m,n]` scaled by `v[i]`; the per-token mask gate.
    ScaleRows(NodeId, NodeId),
    /// Tensor divided by a one-element tensor.
    DivScalar(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// `x` with row `index` replaced by the `[1,d]` tensor `row`.
    ReplaceRow {
        x: NodeId,
        row: NodeId,
        index: usize,
    },
    /// Rank-2: gather rows; rank-1: gather entries. Duplicates allowed.
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// Rank-1 scatter into a zero vector; indices unique.
    Scatter { src: NodeId, idx: Vec<usize> },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    /// Column-masked softmax; gradients flow to both logits and mask.
    MaskedSoftmax { logits: NodeId, mask: NodeId },
    CrossEntropy { logits: NodeId, label: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
    /// Elementwise clamp to `[lo, hi]`; subgradient 1 inside, 0 outside.
    Clamp(NodeId, f64, f64),
    /// Elementwise square root of a nonnegative tensor.
    Sqrt(NodeId),
    /// Row-wise sums of a rank-2 tensor.
    RowSums(NodeId),
    /// Row-wise Euclidean norms of a rank-2 tensor.
    RowNorms(NodeId),
    /// Learned-threshold mask over a rank-1 score vector. Records both the
    /// hard decisions and the sigmoid relaxation; the forward value follows
    /// the tape's [`MaskMode`], the backward is always the sigmoid surrogate.
    ThresholdMask {
        scores: NodeId,
        theta: NodeId,
        tau: f64,
        hard: Vec<f64>,
        relaxed: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Per-slot parameter gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_slot: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.by_slot.get(slot).and_then(Option::as_ref)
    }

    pub fn slots(&self) -> usize {
        self.by_slot.len()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: MaskMode,
}

impl Tape {
    pub fn new(mode: MaskMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Hard and relaxed vectors recorded by a [`Op::ThresholdMask`] node.
    pub fn threshold_record(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id].op {
            Op::ThresholdMask { hard, relaxed, .. } => Some((hard, relaxed)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, slot: usize, value: Tensor) -> NodeId {
        self.push(Op::Param { slot }, value, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        if self.value(b).data().contains(&0.0) {
            return Err(TapeError::Build("division by zero".into()));
        }
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "div",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            }
            .into());
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x / y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Div(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v, self.ng(a))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), v, self.ng(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNT(a, b), v, self.ng(a) || self.ng(b)))
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let vv = self.value(v);
        if va.shape().len() != 2 || vv.shape() != [va.cols()] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vec",
                lhs: va.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            }
            .into());
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vv.data()[j];
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::AddRowVec(a, v), out, self.ng(a) || self.ng(v)))
    }

    pub fn scale_rows(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        let vv = self.value(v);
        if va.shape().len() != 2 || vv.shape() != [va.rows()] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: va.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            }
            .into());
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..r {
            let w = vv.data()[i];
            for x in data[i * c..(i + 1) * c].iter_mut() {
                *x *= w;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::ScaleRows(a, v), out, self.ng(a) || self.ng(v)))
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, TapeError> {
        let vs = self.value(s);
        if vs.len() != 1 {
            return Err(TapeError::Build(format!(
                "div_scalar divisor must have one element, got shape {:?}",
                vs.shape()
            )));
        }
        let d = vs.item();
        if d == 0.0 {
            return Err(TapeError::Build("division by zero".into()));
        }
        // True division, not a reciprocal multiply: x/x must be exactly 1.
        let v = self.value(a).map(|x| x / d);
        Ok(self.push(Op::DivScalar(a, s), v, self.ng(a) || self.ng(s)))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.shape().len() != 2 || lo >= hi || hi > va.cols() {
            return Err(TapeError::Build(format!(
                "slice_cols [{lo}, {hi}) out of range for shape {:?}",
                va.shape()
            )));
        }
        let (r, c) = (va.rows(), va.cols());
        let w = hi - lo;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&va.data()[i * c + lo..i * c + hi]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        Ok(self.push(Op::SliceCols(a, lo, hi), out, self.ng(a)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Build("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != r {
                return Err(TapeError::Build(format!(
                    "concat_cols row mismatch: {:?}",
                    v.shape()
                )));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Build("concat_rows of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != c {
                return Err(TapeError::Build(format!(
                    "concat_rows column mismatch: {:?}",
                    v.shape()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, ng))
    }

    pub fn replace_row(
        &mut self,
        x: NodeId,
        index: usize,
        row: NodeId,
    ) -> Result<NodeId, TapeError> {
        let vx = self.value(x);
        let vr = self.value(row);
        if vx.shape().len() != 2 || vr.shape() != [1, vx.cols()] || index >= vx.rows() {
            return Err(TapeError::Build(format!(
                "replace_row index {index} row {:?} into {:?}",
                vr.shape(),
                vx.shape()
            )));
        }
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        data[index * c..(index + 1) * c].copy_from_slice(vr.data());
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(
            Op::ReplaceRow { x, row, index },
            out,
            self.ng(x) || self.ng(row),
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TapeError> {
        let vx = self.value(x);
        let (out, limit) = match vx.shape().len() {
            1 => {
                let n = vx.len();
                let data: Vec<f64> = idx.iter().map(|&i| vx.data()[i.min(n - 1)]).collect();
                (Tensor::new(vec![idx.len()], data)?, n)
            }
            2 => {
                let (r, c) = (vx.rows(), vx.cols());
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(vx.row(i.min(r - 1)));
                }
                (Tensor::new(vec![idx.len(), c], data)?, r)
            }
            _ => {
                return Err(TapeError::Build(format!(
                    "gather_rows on rank-{} tensor",
                    vx.shape().len()
                )))
            }
        };
        if idx.iter().any(|&i| i >= limit) {
            return Err(TapeError::Build(format!(
                "gather_rows index out of range (limit {limit})"
            )));
        }
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            out,
            self.ng(x),
        ))
    }

    pub fn scatter(&mut self, src: NodeId, idx: &[usize], len: usize) -> Result<NodeId, TapeError> {
        let vs = self.value(src);
        if vs.shape().len() != 1 || vs.len() != idx.len() {
            return Err(TapeError::Build(format!(
                "scatter src shape {:?} vs {} indices",
                vs.shape(),
                idx.len()
            )));
        }
        let mut seen = vec![false; len];
        for &i in idx {
            if i >= len || seen[i] {
                return Err(TapeError::Build(format!(
                    "scatter index {i} out of range or duplicated (len {len})"
                )));
            }
            seen[i] = true;
        }
        let mut data = vec![0.0; len];
        for (t, &i) in idx.iter().enumerate() {
            data[i] = vs.data()[t];
        }
        let out = Tensor::new(vec![len], data)?;
        Ok(self.push(
            Op::Scatter {
                src,
                idx: idx.to_vec(),
            },
            out,
            self.ng(src),
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TapeError> {
        let v = self.value(x).layer_norm(self.value(gain), self.value(bias))?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, v, ng))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).gelu();
        self.push(Op::Gelu(a), v, self.ng(a))
    }

    pub fn masked_softmax(&mut self, logits: NodeId, mask: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(logits).masked_softmax(self.value(mask))?;
        let ng = self.ng(logits) || self.ng(mask);
        Ok(self.push(Op::MaskedSoftmax { logits, mask }, v, ng))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId, TapeError> {
        let (loss, _) = cross_entropy(self.value(logits), label)?;
        Ok(self.push(
            Op::CrossEntropy { logits, label },
            Tensor::scalar(loss),
            self.ng(logits),
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), self.ng(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::MeanAll(a), Tensor::scalar(s / n as f64), self.ng(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TapeError> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, self.ng(a)))
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // `!(lo <= hi)` also rejects NaN bounds
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TapeError> {
        if !(lo <= hi) {
            return Err(TapeError::Build(format!("clamp bounds [{lo}, {hi}]")));
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(Op::Clamp(a, lo, hi), v, self.ng(a)))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(TapeError::Build("sqrt of negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), v, self.ng(a)))
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(TapeError::Build("row_sums expects rank 2".into()));
        }
        let data: Vec<f64> = (0..va.rows()).map(|i| va.row(i).iter().sum()).collect();
        let out = Tensor::new(vec![va.rows()], data)?;
        Ok(self.push(Op::RowSums(a), out, self.ng(a)))
    }

    pub fn row_norms(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(TapeError::Build("row_norms expects rank 2".into()));
        }
        let data: Vec<f64> = (0..va.rows())
            .map(|i| va.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(vec![va.rows()], data)?;
        Ok(self.push(Op::RowNorms(a), out, self.ng(a)))
    }

    /// Learned-threshold mask over rank-1 scores: hard decision
    /// `1 iff score > theta` (strict), relaxed value
    /// `sigma((score - theta) / tau)`. The tape's mode picks which one the
    /// node exposes as its forward value.
    pub fn threshold_mask(
        &mut self,
        scores: NodeId,
        theta: NodeId,
        tau: f64,
    ) -> Result<NodeId, TapeError> {
        let vs = self.value(scores);
        let vt = self.value(theta);
        if vs.shape().len() != 1 || vt.len() != 1 {
            return Err(TapeError::Build(format!(
                "threshold_mask needs rank-1 scores and scalar theta, got {:?} / {:?}",
                vs.shape(),
                vt.shape()
            )));
        }
        if tau <= 0.0 {
            return Err(TapeError::Build(format!("tau must be positive, got {tau}")));
        }
        let th = vt.item();
        let hard: Vec<f64> = vs
            .data()
            .iter()
            .map(|&s| if s > th { 1.0 } else { 0.0 })
            .collect();
        let relaxed: Vec<f64> = vs.data().iter().map(|&s| sigmoid((s - th) / tau)).collect();
        let value = Tensor::from_vec(match self.mode {
            MaskMode::Hard => hard.clone(),
            MaskMode::Relaxed => relaxed.clone(),
        });
        let ng = self.ng(scores) || self.ng(theta);
        Ok(self.push(
            Op::ThresholdMask {
                scores,
                theta,
                tau,
                hard,
                relaxed,
            },
            value,
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// parameter slot reachable from the loss; unreachable slots are absent.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        if self.value(loss).len() != 1 {
            return Err(TapeError::Build(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut max_slot = 0usize;
        for n in &self.nodes {
            if let Op::Param { slot } = n.op {
                max_slot = max_slot.max(slot + 1);
            }
        }
        let mut by_slot: Vec<Option<Tensor>> = (0..max_slot).map(|_| None).collect();

        grads[loss] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param { slot } => match &mut by_slot[*slot] {
                    Some(acc) => *acc = acc.add(&g)?,
                    entry => *entry = Some(g),
                },
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    self.acc(&mut grads, *a, g.mul(self.value(*b))?)?;
                    self.acc(&mut grads, *b, g.mul(self.value(*a))?)?;
                }
                Op::Div(a, b) => {
                    // out = a / b: da = g / b, db = -g * out / b.
                    let vb = self.value(*b);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(vb.data())
                            .map(|(&gi, &bi)| gi / bi)
                            .collect(),
                    )?;
                    let out = self.value(id);
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .zip(vb.data())
                            .map(|((&gi, &oi), &bi)| -gi * oi / bi)
                            .collect(),
                    )?;
                    self.acc(&mut grads, *a, da)?;
                    self.acc(&mut grads, *b, db)?;
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, g.scale(*c))?,
                Op::AddConst(a) => self.acc(&mut grads, *a, g)?,
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.matmul_nt(self.value(*b))?)?;
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, self.value(*a).matmul_tn(&g)?)?;
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.matmul(self.value(*b))?)?;
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g.matmul_tn(self.value(*a))?)?;
                    }
                }
                Op::AddRowVec(a, v) => {
                    if self.ng(*v) {
                        let (r, c) = (g.rows(), g.cols());
                        let mut dv = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                dv[j] += g.at(i, j);
                            }
                        }
                        self.acc(&mut grads, *v, Tensor::from_vec(dv))?;
                    }
                    self.acc(&mut grads, *a, g)?;
                }
                Op::ScaleRows(a, v) => {
                    let (r, c) = (g.rows(), g.cols());
                    let vv = self.value(*v);
                    if self.ng(*a) {
                        let mut da = g.data().to_vec();
                        for i in 0..r {
                            let w = vv.data()[i];
                            for x in da[i * c..(i + 1) * c].iter_mut() {
                                *x *= w;
                            }
                        }
                        self.acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), da)?)?;
                    }
                    if self.ng(*v) {
                        let va = self.value(*a);
                        let dv: Vec<f64> = (0..r)
                            .map(|i| {
                                g.row(i)
                                    .iter()
                                    .zip(va.row(i))
                                    .map(|(&gi, &ai)| gi * ai)
                                    .sum()
                            })
                            .collect();
                        self.acc(&mut grads, *v, Tensor::from_vec(dv))?;
                    }
                }
                Op::DivScalar(a, s) => {
                    let sv = self.value(*s).item();
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.scale(1.0 / sv))?;
                    }
                    if self.ng(*s) {
                        // d/ds (a/s) = -a/s^2 = -out/s.
                        let out = self.value(id);
                        let ds: f64 = g
                            .data()
                            .iter()
                            .zip(out.data())
                            .map(|(&gi, &oi)| -gi * oi / sv)
                            .sum();
                        self.acc(&mut grads, *s, Tensor::scalar(ds))?;
                    }
                }
                Op::SliceCols(a, lo, _hi) => {
                    let va = self.value(*a);
                    let (r, c) = (va.rows(), va.cols());
                    let w = g.cols();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..w {
                            da[i * c + lo + j] = g.at(i, j);
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(vec![r, c], da)?)?;
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let mut dp = Vec::with_capacity(r * w);
                            for i in 0..r {
                                dp.extend_from_slice(&g.row(i)[off..off + w]);
                            }
                            self.acc(&mut grads, p, Tensor::new(vec![r, w], dp)?)?;
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pr = self.value(p).rows();
                        if self.ng(p) {
                            let dp = g.data()[off * c..(off + pr) * c].to_vec();
                            self.acc(&mut grads, p, Tensor::new(vec![pr, c], dp)?)?;
                        }
                        off += pr;
                    }
                }
                Op::ReplaceRow { x, row, index } => {
                    if self.ng(*row) {
                        let dr = g.row(*index).to_vec();
                        self.acc(&mut grads, *row, Tensor::new(vec![1, g.cols()], dr)?)?;
                    }
                    if self.ng(*x) {
                        let c = g.cols();
                        let mut dx = g.data().to_vec();
                        for v in dx[*index * c..(*index + 1) * c].iter_mut() {
                            *v = 0.0;
                        }
                        self.acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx)?)?;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let vx = self.value(*x);
                    let mut dx = Tensor::zeros(vx.shape());
                    match vx.shape().len() {
                        1 => {
                            for (t, &i) in idx.iter().enumerate() {
                                dx.data_mut()[i] += g.data()[t];
                            }
                        }
                        _ => {
                            let c = vx.cols();
                            for (t, &i) in idx.iter().enumerate() {
                                for j in 0..c {
                                    dx.data_mut()[i * c + j] += g.at(t, j);
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, dx)?;
                }
                Op::Scatter { src, idx } => {
                    let ds: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
                    self.acc(&mut grads, *src, Tensor::from_vec(ds))?;
                }
                Op::LayerNorm { x, gain, bias } => {
                    self.layer_norm_backward(&mut grads, &g, *x, *gain, *bias, id)?;
                }
                Op::Gelu(a) => {
                    let va = self.value(*a);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&gi, &xi)| gi * gelu_prime(xi))
                            .collect(),
                    )?;
                    self.acc(&mut grads, *a, da)?;
                }
                Op::MaskedSoftmax { logits, mask } => {
                    self.masked_softmax_backward(&mut grads, &g, *logits, *mask, id)?;
                }
                Op::CrossEntropy { logits, label } => {
                    let (_, probs) = cross_entropy(self.value(*logits), *label)?;
                    let gs = g.item();
                    let mut dl = probs.data().to_vec();
                    dl[*label] -= 1.0;
                    for v in dl.iter_mut() {
                        *v *= gs;
                    }
                    self.acc(&mut grads, *logits, Tensor::from_vec(dl))?;
                }
                Op::SumAll(a) => {
                    let da = Tensor::filled(self.value(*a).shape(), g.item());
                    self.acc(&mut grads, *a, da)?;
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len().max(1);
                    let da = Tensor::filled(self.value(*a).shape(), g.item() / n as f64);
                    self.acc(&mut grads, *a, da)?;
                }
                Op::Reshape(a) => {
                    let da = g.reshape(self.value(*a).shape().to_vec())?;
                    self.acc(&mut grads, *a, da)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let va = self.value(*a);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { 0.0 })
                            .collect(),
                    )?;
                    self.acc(&mut grads, *a, da)?;
                }
                Op::Sqrt(a) => {
                    let out = self.value(id);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .map(|(&gi, &oi)| if oi == 0.0 { 0.0 } else { gi / (2.0 * oi) })
                            .collect(),
                    )?;
                    self.acc(&mut grads, *a, da)?;
                }
                Op::RowSums(a) => {
                    let va = self.value(*a);
                    let (r, c) = (va.rows(), va.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g.data()[i];
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(vec![r, c], da)?)?;
                }
                Op::RowNorms(a) => {
                    let va = self.value(*a);
                    let norms = self.value(id);
                    let (r, c) = (va.rows(), va.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let ni = norms.data()[i];
                        if ni == 0.0 {
                            continue; // norm is not differentiable at 0; subgradient 0
                        }
                        for j in 0..c {
                            da[i * c + j] = g.data()[i] * va.at(i, j) / ni;
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(vec![r, c], da)?)?;
                }
                Op::ThresholdMask {
                    scores,
                    theta,
                    tau,
                    relaxed,
                    ..
                } => {
                    // Straight-through: regardless of the forward mode, the
                    // backward uses the sigmoid surrogate
                    //   d m_k / d s_k   = +sigma'_k / tau
                    //   d m_k / d theta = -sigma'_k / tau
                    let mut ds = vec![0.0; relaxed.len()];
                    let mut dth = 0.0;
                    for k in 0..relaxed.len() {
                        let sp = relaxed[k] * (1.0 - relaxed[k]) / tau;
                        ds[k] = g.data()[k] * sp;
                        dth -= g.data()[k] * sp;
                    }
                    if self.ng(*scores) {
                        self.acc(&mut grads, *scores, Tensor::from_vec(ds))?;
                    }
                    if self.ng(*theta) {
                        self.acc(&mut grads, *theta, Tensor::scalar(dth))?;
                    }
                }
            }
        }
        Ok(Gradients { by_slot })
    }

    fn acc(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        g: Tensor,
    ) -> Result<(), TapeError> {
        if !self.nodes[id].needs_grad {
            return Ok(());
        }
        match &mut grads[id] {
            Some(acc) => *acc = acc.add(&g)?,
            entry => *entry = Some(g),
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        _out: NodeId,
    ) -> Result<(), TapeError> {
        let vx = self.value(x);
        let vg = self.value(gain);
        let (r, d) = (vx.rows(), vx.cols());
        let mut dx = vec![0.0; r * d];
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        for i in 0..r {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
            let go = g.row(i);
            // ghat = upstream grad through the gain.
            let ghat: Vec<f64> = go.iter().zip(vg.data()).map(|(&a, &b)| a * b).collect();
            let mean_ghat = ghat.iter().sum::<f64>() / d as f64;
            let mean_ghat_xhat = ghat
                .iter()
                .zip(&xhat)
                .map(|(&a, &b)| a * b)
                .sum::<f64>()
                / d as f64;
            for j in 0..d {
                dx[i * d + j] = inv * (ghat[j] - mean_ghat - xhat[j] * mean_ghat_xhat);
                dgain[j] += go[j] * xhat[j];
                dbias[j] += go[j];
            }
        }
        if self.ng(x) {
            self.acc(grads, x, Tensor::new(vec![r, d], dx)?)?;
        }
        if self.ng(gain) {
            self.acc(grads, gain, Tensor::from_vec(dgain))?;
        }
        if self.ng(bias) {
            self.acc(grads, bias, Tensor::from_vec(dbias))?;
        }
        Ok(())
    }

    fn masked_softmax_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        logits: NodeId,
        mask: NodeId,
        out: NodeId,
    ) -> Result<(), TapeError> {
        let s = self.value(out);
        let va = self.value(logits);
        let vm = self.value(mask);
        let (r, c) = (s.rows(), s.cols());

        // d loss / d logits: the usual softmax Jacobian; masked columns have
        // S = 0 so their logit gradient vanishes automatically.
        if self.ng(logits) {
            let mut da = vec![0.0; r * c];
            for i in 0..r {
                let srow = s.row(i);
                let grow = g.row(i);
                let dot: f64 = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    da[i * c + j] = srow[j] * (grow[j] - dot);
                }
            }
            self.acc(grads, logits, Tensor::new(vec![r, c], da)?)?;
        }

        // d loss / d mask_k = sum_i (e_ik / D_i) (g_ik - sum_j g_ij S_ij)
        // with e_ik = exp(a_ik - mx_i), mx_i the max over kept columns and
        // D_i the weighted denominator. This is well defined at m_k = 0,
        // which is exactly where the straight-through threshold gradient
        // needs it.
        if self.ng(mask) {
            let mut dm = vec![0.0; c];
            for i in 0..r {
                let arow = va.row(i);
                let srow = s.row(i);
                let grow = g.row(i);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..c {
                    if vm.data()[j] > 0.0 && arow[j] > mx {
                        mx = arow[j];
                    }
                }
                let mut denom = 0.0;
                for j in 0..c {
                    if vm.data()[j] > 0.0 {
                        denom += (arow[j] - mx).exp() * vm.data()[j];
                    }
                }
                let dot: f64 = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                for k in 0..c {
                    let e = (arow[k] - mx).exp();
                    dm[k] += e / denom * (grow[k] - dot);
                }
            }
            self.acc(grads, mask, Tensor::from_vec(dm))?;
        }
        Ok(())
    }
}
