//! Dense row-major `f64` tensors and the numeric kernels used by the model.
//!
//! Shapes are dynamic (`Vec<usize>`), but in practice everything is rank 1 or
//! rank 2. Public kernels validate shapes and finiteness and report problems
//! as [`TensorError`]; panics are reserved for internal invariant breaks.
//!
//! Two details matter for bit-exact reproducibility and are relied on by the
//! model's masked-versus-gathered equivalence:
//!
//! * all reductions run in a fixed ascending-index order, and
//! * [`masked_softmax`](Tensor::masked_softmax) writes exact `0.0` for masked
//!   columns without evaluating `exp` there, and shifts by the max over kept
//!   columns only, so kept-column arithmetic is identical whether masked
//!   columns are present or physically removed.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("masked softmax row has no kept column")]
    EmptyMask,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(TensorError::BadLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from equal-length rows. Panics on ragged input; callers
    /// construct these from literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    /// Rank-0-like scalar, stored as shape `[1]`.
    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{}", self.shape.len());
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{}", self.shape.len());
        self.shape[1]
    }

    /// Element of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on {} elements", self.data.len());
        self.data[0]
    }

    /// Same data, new shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn check_same_shape(&self, rhs: &Self, op: &'static str) -> Result<(), TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_same_shape(rhs, "add")?;
        Ok(self.zip(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_same_shape(rhs, "sub")?;
        Ok(self.zip(rhs, |a, b| a - b))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_same_shape(rhs, "mul")?;
        Ok(self.zip(rhs, |a, b| a * b))
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    fn zip(&self, rhs: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn check_rank2(&self, op: &'static str) -> Result<(), TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// `self @ rhs` for rank-2 operands, `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_rank2("matmul")?;
        rhs.check_rank2("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // i-k-j order: stride-1 inner loop over both rhs and out rows.
        for i in 0..m {
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * rrow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self @ rhs^T`, `[m,k] x [n,k] -> [m,n]`.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_rank2("matmul_nt")?;
        rhs.check_rank2("matmul_nt")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += arow[kk] * brow[kk];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self^T @ rhs`, `[k,m] x [k,n] -> [m,n]`.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self, TensorError> {
        self.check_rank2("matmul_tn")?;
        rhs.check_rank2("matmul_tn")?;
        let (k, m) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for kk in 0..k {
            let arow = &self.data[kk * m..(kk + 1) * m];
            let brow = &rhs.data[kk * n..(kk + 1) * n];
            for i in 0..m {
                let a = arow[i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Row-wise shift-stable softmax of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Result<Self, TensorError> {
        self.check_rank2("softmax_rows")?;
        if !self.data.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite("softmax_rows"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                denom += e;
            }
            for v in orow.iter_mut() {
                *v /= denom;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// Column-masked softmax: `S_ij = exp(A_ij) m_j / sum_k exp(A_ik) m_k`.
    ///
    /// `mask` is rank 1 with one weight per column; weights are usually hard
    /// `{0, 1}` but any nonnegative weights work (the relaxed training mask
    /// uses sigmoid values). The shift uses the max over columns with
    /// `m_j > 0`, and columns with `m_j == 0` are written as exact `0.0`
    /// without evaluating `exp`, which both avoids `inf * 0` and keeps the
    /// kept-column arithmetic identical to a physically gathered layout.
    pub fn masked_softmax(&self, mask: &Self) -> Result<Self, TensorError> {
        self.check_rank2("masked_softmax")?;
        if mask.shape.len() != 1 || mask.shape[0] != self.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape.clone(),
                rhs: mask.shape.clone(),
            });
        }
        if !self.data.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite("masked_softmax"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let m = &mask.data;
        if !m.iter().any(|&w| w > 0.0) {
            return Err(TensorError::EmptyMask);
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if m[j] > 0.0 && row[j] > mx {
                    mx = row[j];
                }
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut denom = 0.0;
            for j in 0..c {
                if m[j] > 0.0 {
                    let e = (row[j] - mx).exp() * m[j];
                    orow[j] = e;
                    denom += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= denom;
            }
        }
        Tensor::new(vec![r, c], out)
    }

    /// Per-row layer norm with learned gain and bias:
    /// `y = g * (x - mean) / sqrt(var + eps) + b`, population variance,
    /// `eps = 1e-6`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self) -> Result<Self, TensorError> {
        self.check_rank2("layer_norm")?;
        let d = self.shape[1];
        if gain.shape != [d] || bias.shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let r = self.shape[0];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &self.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                orow[j] = gain.data[j] * (row[j] - mean) * inv + bias.data[j];
            }
        }
        Tensor::new(vec![r, d], out)
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx of exact GELU: `Phi(x) + x phi(x)` with the standard normal cdf/pdf.
pub fn gelu_prime(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

/// Cross-entropy of a rank-1 logit vector against an integer label.
/// Returns `(loss, probabilities)`; the probabilities are reused by the
/// backward pass (`d loss / d logits = p - onehot(label)`).
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor), TensorError> {
    if logits.shape().len() != 1 {
        return Err(TensorError::BadRank {
            op: "cross_entropy",
            expected: 1,
            shape: logits.shape().to_vec(),
        });
    }
    let c = logits.len();
    if label >= c {
        return Err(TensorError::BadLabel { label, classes: c });
    }
    let xs = logits.data();
    if !xs.iter().all(|x| x.is_finite()) {
        return Err(TensorError::NonFinite("cross_entropy"));
    }
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / denom).collect();
    let loss = denom.ln() - (xs[label] - mx);
    Ok((loss, Tensor::from_vec(probs)))
}
