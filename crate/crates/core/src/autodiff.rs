//! Reverse-mode differentiation on a flat tape.
//!
//! A [`Tape`] records a computation as a topologically ordered list of nodes;
//! forward values are computed eagerly at recording time and cached. The tape
//! is rebuilt for every step (static tape), which keeps the correctness story
//! simple: `backward` is an exact reverse sweep over the recorded nodes.
//!
//! The operator set is exactly what the encoder, the aggregators and the
//! contrastive objective need. Softmax and log-sum-exp subtract the row max
//! before exponentiating.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, ShapeError, Tensor};

/// Floor applied to row norms before dividing, to avoid the zero-vector
/// singularity of cosine similarity.
pub const NORM_FLOOR: f64 = 1e-8;

/// Large finite stand-in for minus infinity in pre-softmax masking. Finite so
/// that tensors never hold non-finite values; exp(MASK_NEG - max) underflows
/// to exactly 0 in the softmax.
pub const MASK_NEG: f64 = -1e30;

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("loss node must be scalar (1 x 1), got {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("seed gradient shape {seed:?} does not match node shape {node:?}")]
    SeedShape { seed: [usize; 2], node: [usize; 2] },
    #[error("finite_diff_check requires eps > 0, got {0}")]
    BadEps(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows; the result has one row.
    Rows,
    /// Reduce over columns; the result has one column.
    Cols,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Softmax(NodeId, Axis),
    LogSumExp(NodeId, Axis),
    Mean(NodeId, Axis),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    L2NormalizeRows(NodeId),
    DiagPart(NodeId),
    MaskFill {
        x: NodeId,
        mask: Arc<Vec<bool>>,
        value: f64,
    },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

/// Gradients for every node of a tape, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter. The tensor is shared, not copied.
    pub fn leaf(&mut self, value: Arc<Tensor>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite leaf value");
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf_owned(&mut self, value: Tensor) -> NodeId {
        self.leaf(Arc::new(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = matmul_nn(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a * b^T`; rows of `b` are treated as the right factor's columns.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulNT(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Add a `1 x n` bias row to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(ShapeError::Mismatch {
                op: "add_bias",
                left: xv.shape(),
                right: bv.shape(),
            }
            .into());
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let cols = out.cols();
            let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (r, &b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Multiply every element by a `1 x 1` node (e.g. an inverse temperature).
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(ShapeError::Invalid {
                op: "mul_scalar",
                shape: sv.shape(),
                detail: "scalar multiplier must be 1 x 1".into(),
            }
            .into());
        }
        let c = sv.data()[0];
        let v = self.value(x).scale(c);
        Ok(self.push(Op::MulScalar(x, s), v))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_value);
        self.push(Op::Gelu(x), v)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        for (name, t) in [("gamma", gv), ("beta", bv)] {
            if t.rows() != 1 || t.cols() != xv.cols() {
                return Err(ShapeError::Invalid {
                    op: "layer_norm",
                    shape: t.shape(),
                    detail: format!("{name} must be 1 x {}", xv.cols()),
                }
                .into());
            }
        }
        let n = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), n);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                orow[j] = gv.data()[j] * xhat + bv.data()[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, out))
    }

    pub fn softmax(&mut self, x: NodeId, axis: Axis) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        apply_lanes(&mut out, axis, |lane| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        });
        self.push(Op::Softmax(x, axis), out)
    }

    pub fn log_sum_exp(&mut self, x: NodeId, axis: Axis) -> NodeId {
        let xv = self.value(x);
        let out = reduce_lanes(xv, axis, |lane| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = lane.iter().map(|&v| (v - m).exp()).sum();
            m + s.ln()
        });
        self.push(Op::LogSumExp(x, axis), out)
    }

    pub fn mean(&mut self, x: NodeId, axis: Axis) -> NodeId {
        let xv = self.value(x);
        let out = reduce_lanes(xv, axis, |lane| {
            lane.iter().sum::<f64>() / lane.len() as f64
        });
        self.push(Op::Mean(x, axis), out)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Op::MeanAll(x), Tensor::scalar(v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let cols = self.value(parts[0]).cols();
        let mut rows = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(ShapeError::Mismatch {
                    op: "concat_rows",
                    left: [rows.len(), cols],
                    right: t.shape(),
                }
                .into());
            }
            for i in 0..t.rows() {
                rows.push(t.row(i).to_vec());
            }
        }
        let v = Tensor::from_rows(&rows)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(ShapeError::Mismatch {
                    op: "concat_cols",
                    left: [rows, total_cols],
                    right: t.shape(),
                }
                .into());
            }
            for i in 0..rows {
                let dst = i * total_cols + offset;
                out.data_mut()[dst..dst + t.cols()].copy_from_slice(t.row(i));
            }
            offset += t.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(ShapeError::Invalid {
                op: "slice_cols",
                shape: xv.shape(),
                detail: format!("slice [{start}, {}) out of range", start + len),
            }
            .into());
        }
        let mut out = Tensor::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            let src = &xv.row(i)[start..start + len];
            out.data_mut()[i * len..(i + 1) * len].copy_from_slice(src);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, out))
    }

    /// Select rows by index; duplicate indices are allowed, and gradients
    /// scatter-add back (this is the embedding-lookup primitive).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(ShapeError::Invalid {
                op: "gather_rows",
                shape: xv.shape(),
                detail: format!("row index {bad} out of range"),
            }
            .into());
        }
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            let cols = xv.cols();
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(xv.row(i));
        }
        Ok(self.push(
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            out,
        ))
    }

    /// Normalize each row to unit length, with [`NORM_FLOOR`] guarding
    /// near-zero rows (those are divided by the floor instead).
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = if norm > NORM_FLOOR { norm } else { NORM_FLOOR };
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        self.push(Op::L2NormalizeRows(x), out)
    }

    /// Cosine similarity between all row pairs: `(m x d, n x d) -> m x n`.
    pub fn cosine_similarity_matrix(
        &mut self,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let na = self.l2_normalize_rows(a);
        let nb = self.l2_normalize_rows(b);
        self.matmul_nt(na, nb)
    }

    pub fn diag_part(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if xv.rows() != xv.cols() {
            return Err(ShapeError::Invalid {
                op: "diag_part",
                shape: xv.shape(),
                detail: "matrix must be square".into(),
            }
            .into());
        }
        let n = xv.rows();
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            out.set(i, 0, xv.at(i, i));
        }
        Ok(self.push(Op::DiagPart(x), out))
    }

    /// Replace masked entries with `value`; masked entries receive zero
    /// gradient. Use [`MASK_NEG`] as the value for pre-softmax masking.
    pub fn mask_fill(
        &mut self,
        x: NodeId,
        mask: Arc<Vec<bool>>,
        value: f64,
    ) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(ShapeError::Invalid {
                op: "mask_fill",
                shape: xv.shape(),
                detail: format!("mask length {} != element count {}", mask.len(), xv.numel()),
            }
            .into());
        }
        let mut out = xv.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
            if m {
                *v = value;
            }
        }
        Ok(self.push(Op::MaskFill { x, mask, value }, out))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss { shape: lv.shape() });
        }
        self.backward_seeded(vec![(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep seeded with explicit output gradients. Used to continue
    /// a backward pass that started on another tape (e.g. a loss graph over
    /// stacked embeddings).
    pub fn backward_seeded(
        &self,
        seeds: Vec<(NodeId, Tensor)>,
    ) -> Result<Gradients, AutodiffError> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            let node_shape = self.value(id).shape();
            if seed.shape() != node_shape {
                return Err(AutodiffError::SeedShape {
                    seed: seed.shape(),
                    node: node_shape,
                });
            }
            accumulate(&mut grads[id.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // c = a b: da = g b^T, db = a^T g
                let da = matmul_nt(g, self.value(*b))?;
                let db = matmul_tn(self.value(*a), g)?;
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::MatMulNT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let da = matmul_nn(g, self.value(*b))?;
                let db = matmul_tn(g, self.value(*a))?;
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddBias(x, bias) => {
                accumulate(&mut grads[x.0], g.clone());
                let cols = g.cols();
                let mut db = Tensor::zeros(1, cols);
                for i in 0..g.rows() {
                    for (s, &v) in db.data_mut().iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                accumulate(&mut grads[bias.0], db);
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], g.scale(*c));
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                accumulate(&mut grads[x.0], g.scale(sv));
                let xv = self.value(*x);
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                accumulate(&mut grads[s.0], Tensor::scalar(ds));
            }
            Op::Exp(x) => {
                let y = self.value(NodeId(i));
                let dx = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&u, &e)| u * e)
                        .collect(),
                )?;
                accumulate(&mut grads[x.0], dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&u, &v)| u * gelu_grad(v))
                        .collect(),
                )?;
                accumulate(&mut grads[x.0], dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let n = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), n);
                let mut dgamma = Tensor::zeros(1, n);
                let mut dbeta = Tensor::zeros(1, n);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let grow = g.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(gv.data())
                        .map(|(&u, &ga)| u * ga)
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / n as f64;
                    let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                    for j in 0..n {
                        dgamma.data_mut()[j] += grow[j] * xhat[j];
                        dbeta.data_mut()[j] += grow[j];
                    }
                }
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[gamma.0], dgamma);
                accumulate(&mut grads[beta.0], dbeta);
            }
            Op::Softmax(x, axis) => {
                let s = self.value(NodeId(i));
                let mut dx = g.clone();
                backprop_lanes(&mut dx, s, *axis, |dlane, slane| {
                    let dot: f64 = dlane.iter().zip(slane.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &sv) in dlane.iter_mut().zip(slane.iter()) {
                        *d = sv * (*d - dot);
                    }
                });
                accumulate(&mut grads[x.0], dx);
            }
            Op::LogSumExp(x, axis) => {
                let xv = self.value(*x);
                let lse = self.value(NodeId(i));
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                match axis {
                    Axis::Cols => {
                        for r in 0..xv.rows() {
                            let u = g.at(r, 0);
                            let l = lse.at(r, 0);
                            let cols = xv.cols();
                            let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                            for (d, &v) in dst.iter_mut().zip(xv.row(r)) {
                                *d = u * (v - l).exp();
                            }
                        }
                    }
                    Axis::Rows => {
                        for c in 0..xv.cols() {
                            let u = g.at(0, c);
                            let l = lse.at(0, c);
                            for r in 0..xv.rows() {
                                dx.set(r, c, u * (xv.at(r, c) - l).exp());
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Mean(x, axis) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                match axis {
                    Axis::Rows => {
                        let inv = 1.0 / xv.rows() as f64;
                        for r in 0..xv.rows() {
                            for c in 0..xv.cols() {
                                dx.set(r, c, g.at(0, c) * inv);
                            }
                        }
                    }
                    Axis::Cols => {
                        let inv = 1.0 / xv.cols() as f64;
                        for r in 0..xv.rows() {
                            for c in 0..xv.cols() {
                                dx.set(r, c, g.at(r, 0) * inv);
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let u = g.data()[0] / xv.numel() as f64;
                accumulate(&mut grads[x.0], Tensor::filled(xv.rows(), xv.cols(), u));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let cols = g.cols();
                    let mut dp = Tensor::zeros(pr, cols);
                    for r in 0..pr {
                        dp.data_mut()[r * cols..(r + 1) * cols]
                            .copy_from_slice(g.row(offset + r));
                    }
                    accumulate(&mut grads[p.0], dp);
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = Tensor::zeros(g.rows(), pc);
                    for r in 0..g.rows() {
                        dp.data_mut()[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g.row(r)[offset..offset + pc]);
                    }
                    accumulate(&mut grads[p.0], dp);
                    offset += pc;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    let cols = xv.cols();
                    let dst = &mut dx.data_mut()[r * cols + start..r * cols + start + len];
                    dst.copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for (r, &i_src) in idx.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i_src * cols..(i_src + 1) * cols];
                    for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::L2NormalizeRows(x) => {
                let xv = self.value(*x);
                let yv = self.value(NodeId(i));
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), cols);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let yrow = yv.row(r);
                    let grow = g.row(r);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    if norm > NORM_FLOOR {
                        let dot: f64 =
                            yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dst[j] = (grow[j] - yrow[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..cols {
                            dst[j] = grow[j] / NORM_FLOOR;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::DiagPart(x) => {
                let n = self.value(*x).rows();
                let mut dx = Tensor::zeros(n, n);
                for r in 0..n {
                    dx.set(r, r, g.at(r, 0));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::MaskFill { x, mask, .. } => {
                let mut dx = g.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                    if m {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape drift"),
        None => *slot = Some(g),
    }
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
}

/// Apply `f` to each lane of `t` (rows for `Axis::Cols`, columns for
/// `Axis::Rows`), mutating in place.
fn apply_lanes(t: &mut Tensor, axis: Axis, f: impl Fn(&mut [f64])) {
    let (rows, cols) = (t.rows(), t.cols());
    match axis {
        Axis::Cols => {
            for r in 0..rows {
                f(&mut t.data_mut()[r * cols..(r + 1) * cols]);
            }
        }
        Axis::Rows => {
            let mut lane = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    lane[r] = t.at(r, c);
                }
                f(&mut lane);
                for r in 0..rows {
                    t.set(r, c, lane[r]);
                }
            }
        }
    }
}

fn backprop_lanes(
    d: &mut Tensor,
    s: &Tensor,
    axis: Axis,
    f: impl Fn(&mut [f64], &[f64]),
) {
    let (rows, cols) = (d.rows(), d.cols());
    match axis {
        Axis::Cols => {
            for r in 0..rows {
                let srow = s.row(r).to_vec();
                f(&mut d.data_mut()[r * cols..(r + 1) * cols], &srow);
            }
        }
        Axis::Rows => {
            let mut dlane = vec![0.0; rows];
            let mut slane = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    dlane[r] = d.at(r, c);
                    slane[r] = s.at(r, c);
                }
                f(&mut dlane, &slane);
                for r in 0..rows {
                    d.set(r, c, dlane[r]);
                }
            }
        }
    }
}

fn reduce_lanes(t: &Tensor, axis: Axis, f: impl Fn(&[f64]) -> f64) -> Tensor {
    match axis {
        Axis::Cols => {
            let mut out = Tensor::zeros(t.rows(), 1);
            for r in 0..t.rows() {
                out.set(r, 0, f(t.row(r)));
            }
            out
        }
        Axis::Rows => {
            let mut out = Tensor::zeros(1, t.cols());
            let mut lane = vec![0.0; t.rows()];
            for c in 0..t.cols() {
                for r in 0..t.rows() {
                    lane[r] = t.at(r, c);
                }
                out.set(0, c, f(&lane));
            }
            out
        }
    }
}

/// Central-difference check of an analytic gradient.
///
/// Samples up to `n_coords` coordinates (without replacement, seeded) across
/// the flattened parameter list, evaluates `(f(p + eps e) - f(p - eps e)) / 2 eps`
/// and returns the maximum relative error against `analytic`, with the
/// relative denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64, AutodiffError>
where
    F: Fn(&[Tensor]) -> f64,
{
    if eps <= 0.0 {
        return Err(AutodiffError::BadEps(eps));
    }
    assert_eq!(params.len(), analytic.len());
    let total: usize = params.iter().map(Tensor::numel).sum();
    let take = n_coords.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, total, take);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for flat in coords {
        let (pi, offset) = locate(params, flat);
        let orig = work[pi].data()[offset];
        work[pi].data_mut()[offset] = orig + eps;
        let fp = f(&work);
        work[pi].data_mut()[offset] = orig - eps;
        let fm = f(&work);
        work[pi].data_mut()[offset] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[pi].data()[offset];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.numel() {
            return (i, flat);
        }
        flat -= p.numel();
    }
    unreachable!("flat index out of range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_for_graph<G>(build: G, inputs: &[Tensor], eps: f64, seed: u64) -> f64
    where
        G: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let eval = |p: &[Tensor]| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = p.iter().map(|t| tape.leaf_owned(t.clone())).collect();
            let out = build(&mut tape, &ids);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf_owned(t.clone())).collect();
        let out = build(&mut tape, &ids);
        let grads = tape.backward(out).unwrap();
        let analytic: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(id).rows(), tape.value(id).cols()))
            })
            .collect();
        finite_diff_check(eval, inputs, &analytic, eps, 400, seed).unwrap()
    }

    #[test]
    fn softmax_of_single_element_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::row_vector(vec![3.7]));
        let s = tape.softmax(x, Axis::Cols);
        assert_eq!(tape.value(s).data(), &[1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(6, 9, 3.0, &mut rng);
        let shifted = x.map(|v| v + 123.456);
        let mut tape = Tape::new();
        let a = tape.leaf_owned(x);
        let b = tape.leaf_owned(shifted);
        let sa = tape.softmax(a, Axis::Cols);
        let sb = tape.softmax(b, Axis::Cols);
        for r in 0..6 {
            let sum: f64 = tape.value(sa).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_of_zeros_is_ln_count() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::row_vector(vec![0.0, 0.0, 0.0, 0.0]));
        let l = tape.log_sum_exp(x, Axis::Cols);
        assert!((tape.value(l).data()[0] - 4.0f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).data()[0] - 1.386_294_4).abs() < 1e-7);
    }

    #[test]
    fn cosine_matrix_of_identity_rows_is_identity() {
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf_owned(eye.clone());
        let b = tape.leaf_owned(eye);
        let c = tape.cosine_similarity_matrix(a, b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((tape.value(c).at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(5, 8, 2.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf_owned(x);
        let n = tape.l2_normalize_rows(a);
        for r in 0..5 {
            let norm: f64 = tape.value(n).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        // loss = sum(x) expressed as mean * numel
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 4.0, 9.0, -1.0]).unwrap());
        let m = tape.mean_all(x);
        let loss = tape.scale(m, 6.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_squared_norm_is_x() {
        let x = Tensor::row_vector(vec![1.5, -2.0, 0.25, 3.0]);
        let mut tape = Tape::new();
        let a = tape.leaf_owned(x.clone());
        let sq = tape.matmul_nt(a, a).unwrap(); // 1x1 = ||x||^2
        let loss = tape.scale(sq, 0.5);
        let grads = tape.backward(loss).unwrap();
        for (g, v) in grads.get(a).unwrap().data().iter().zip(x.data()) {
            assert!((g - v).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn finite_diff_is_tiny_for_linear_function() {
        // f(x) = sum(2x): exactly linear, central differences are exact.
        let x = Tensor::row_vector(vec![0.3, -1.2, 2.2, 0.0, 5.5]);
        let err = fd_for_graph(
            |tape, ids| {
                let s = tape.scale(ids[0], 2.0);
                let m = tape.mean_all(s);
                tape.scale(m, 5.0)
            },
            &[x],
            1e-4,
            7,
        );
        assert!(err < 1e-10, "linear FD error {err}");
    }

    #[test]
    fn finite_diff_is_tiny_for_quadratic_at_coarse_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(1, 32, 1.0, &mut rng);
        let err = fd_for_graph(
            |tape, ids| tape.matmul_nt(ids[0], ids[0]).unwrap(),
            &[x],
            1e-3,
            13,
        );
        assert!(err < 1e-9, "quadratic FD error {err}");
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(4, 6, 1.0, &mut rng);
        let w = Tensor::randn(6, 5, 0.5, &mut rng);
        let gamma = Tensor::filled(1, 5, 1.1);
        let beta = Tensor::randn(1, 5, 0.1, &mut rng);
        let err = fd_for_graph(
            |tape, ids| {
                let h = tape.matmul(ids[0], ids[1]).unwrap();
                let n = tape.layer_norm(h, ids[2], ids[3], 1e-5).unwrap();
                let a = tape.gelu(n);
                let s = tape.softmax(a, Axis::Cols);
                let l = tape.log_sum_exp(s, Axis::Cols);
                tape.mean_all(l)
            },
            &[x, w, gamma, beta],
            1e-5,
            31,
        );
        assert!(err < 1e-6, "composite FD error {err}");
    }

    #[test]
    fn cosine_similarity_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = Tensor::randn(8, 16, 1.0, &mut rng);
        let b = Tensor::randn(8, 16, 1.0, &mut rng);
        let err = fd_for_graph(
            |tape, ids| {
                let c = tape.cosine_similarity_matrix(ids[0], ids[1]).unwrap();
                tape.mean_all(c)
            },
            &[a, b],
            1e-5,
            47,
        );
        assert!(err < 1e-5, "cosine FD error {err}");
    }

    #[test]
    fn gather_concat_slice_mask_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let table = Tensor::randn(7, 6, 1.0, &mut rng);
        let x = Tensor::randn(4, 6, 1.0, &mut rng);
        let mask: Arc<Vec<bool>> = Arc::new((0..24).map(|i| i % 5 == 0).collect());
        let err = fd_for_graph(
            |tape, ids| {
                let gathered = tape.gather_rows(ids[0], &[0, 3, 3, 6]).unwrap();
                let joined = tape.concat_cols(&[gathered, ids[1]]).unwrap();
                let left = tape.slice_cols(joined, 0, 6).unwrap();
                let masked = tape.mask_fill(left, mask.clone(), MASK_NEG).unwrap();
                let sm = tape.softmax(masked, Axis::Cols);
                let picked = tape.gather_rows(sm, &[1, 2]).unwrap();
                let m = tape.mean(picked, Axis::Rows);
                tape.mean_all(m)
            },
            &[table, x],
            1e-5,
            59,
        );
        assert!(err < 1e-6, "gather/concat/slice/mask FD error {err}");
    }

    #[test]
    fn diag_and_scalar_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Tensor::randn(5, 5, 1.0, &mut rng);
        let s = Tensor::scalar(0.3);
        let err = fd_for_graph(
            |tape, ids| {
                let e = tape.exp(ids[1]);
                let scaled = tape.mul_scalar(ids[0], e).unwrap();
                let d = tape.diag_part(scaled).unwrap();
                let l = tape.log_sum_exp(d, Axis::Rows);
                tape.mean_all(l)
            },
            &[x, s],
            1e-5,
            81,
        );
        assert!(err < 1e-6, "diag/scalar FD error {err}");
    }

    #[test]
    fn gradients_are_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let x = Tensor::randn(12, 8, 1.0, &mut rng);
        let w = Tensor::randn(8, 8, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf_owned(x.clone());
            let b = tape.leaf_owned(w.clone());
            let h = tape.matmul(a, b).unwrap();
            let g = tape.gelu(h);
            let m = tape.mean_all(g);
            let grads = tape.backward(m).unwrap();
            (
                grads.get(a).unwrap().data().to_vec(),
                grads.get(b).unwrap().data().to_vec(),
            )
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn mean_axis_variants() {
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf_owned(x);
        let over_rows = tape.mean(a, Axis::Rows);
        let over_cols = tape.mean(a, Axis::Cols);
        assert_eq!(tape.value(over_rows).data(), &[3.0, 4.0, 5.0]);
        assert_eq!(tape.value(over_cols).data(), &[2.0, 6.0]);
    }
}
