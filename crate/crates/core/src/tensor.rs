//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The tape records every operation in construction order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Two element types are supported: `f64` for
//! verification suites (finite-difference gradient checks) and `f32` for
//! training runs.
//!
//! Shapes are strict: apart from the explicit row-broadcast ops
//! ([`Tape::add_row`], [`Tape::mul_row`]) every binary operation requires
//! exactly matching shapes.

use num_traits::Float;

use crate::{Error, Result};

/// Epsilon added inside the RMS normalization root.
pub const RMS_EPS: f64 = 1e-6;

/// Element dtype tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element of a tensor: `f32` for training, `f64` for verification.
pub trait Element:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_le_bytes(bytes: &[u8]) -> Self;
    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn byte_width() -> usize;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn byte_width() -> usize {
        4
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn byte_width() -> usize {
        8
    }
}

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Element> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix; rank-1 tensors are one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn at(&self, i: usize) -> F {
        self.data[i]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> F {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Frobenius norm squared, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

/// Boolean visibility matrix for masked attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(n_rows: usize, n_cols: usize, value: bool) -> Self {
        BoolMatrix {
            n_rows,
            n_cols,
            data: vec![value; n_rows * n_cols],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.n_cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.n_cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// One weighted cross-entropy term: `weight * (-log softmax(logits[row])[target])`.
#[derive(Debug, Clone)]
pub struct CeTerm {
    pub row: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    MulRow { x: usize, gain: usize },
    Embed { table: usize, ids: Vec<usize> },
    RmsNorm { x: usize },
    Gelu { x: usize },
    MaskedSoftmaxRows { x: usize, allow: BoolMatrix },
    SliceCols { x: usize, start: usize, width: usize },
    ConcatCols { parts: Vec<usize> },
    Sum { x: usize },
    CrossEntropyRows { logits: usize, terms: Vec<CeTerm>, scale: f64 },
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of the loss with respect to the given node, if it was tracked.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in construction order; inputs always precede outputs,
/// so construction order is a topological order of the computation graph.
pub struct Tape<F: Element> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let k = F::from_f64(c);
        let data = ta.data.iter().map(|&x| x * k).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[a.0]);
        self.push(value, Op::Scale { a: a.0, c }, rg)
    }

    /// Matrix product `A[m,k] . B[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let value = matmul_raw(ta, tb);
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    /// Matrix product against a transposed right factor:
    /// `A[m,k] . B[n,k]^T -> [m,n]`. Used for attention scores and the
    /// weight-tied output head.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let value = matmul_nt_raw(ta, tb);
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::MatmulNT { a: a.0, b: b.0 }, rg))
    }

    /// Broadcast-add a rank-1 bias to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tb.shape.len() != 1 || tb.shape[0] != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: tx.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let cols = tx.cols();
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data[i % cols])
            .collect();
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[x.0, bias.0]);
        Ok(self.push(value, Op::AddRow { x: x.0, bias: bias.0 }, rg))
    }

    /// Broadcast-multiply every row of `x` by a rank-1 gain.
    pub fn mul_row(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        if tg.shape.len() != 1 || tg.shape[0] != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: tx.shape.clone(),
                right: tg.shape.clone(),
            });
        }
        let cols = tx.cols();
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tg.data[i % cols])
            .collect();
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[x.0, gain.0]);
        Ok(self.push(value, Op::MulRow { x: x.0, gain: gain.0 }, rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].value;
        if tt.shape.len() != 2 {
            return Err(Error::InvalidArgument(
                "embedding table must be rank 2".into(),
            ));
        }
        let (v, d) = (tt.shape[0], tt.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::TargetOutOfRange { target: bad, vocab: v });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        let rg = self.needs_grad(&[table.0]);
        Ok(self.push(
            value,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise RMS normalization: `y = x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = &tx.data[r * cols..(r + 1) * cols];
            let ms: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / cols as f64;
            let inv = F::from_f64(1.0 / (ms + RMS_EPS).sqrt());
            data.extend(row.iter().map(|&v| v * inv));
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[x.0]);
        self.push(value, Op::RmsNorm { x: x.0 }, rg)
    }

    /// Tanh-approximated GELU, applied elementwise.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| F::from_f64(gelu_f(v.as_f64()))).collect();
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[x.0]);
        self.push(value, Op::Gelu { x: x.0 }, rg)
    }

    /// Row-wise softmax restricted to allowed positions.
    ///
    /// Disallowed entries get probability exactly zero; each row is
    /// stabilized by subtracting its maximum over allowed entries.
    pub fn masked_softmax_rows(&mut self, x: NodeId, allow: &BoolMatrix) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        if allow.n_rows() != rows || allow.n_cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_rows",
                left: tx.shape.clone(),
                right: vec![allow.n_rows(), allow.n_cols()],
            });
        }
        let mut data = vec![F::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if allow.get(r, c) {
                    max = max.max(row[c].as_f64());
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if allow.get(r, c) {
                    denom += (row[c].as_f64() - max).exp();
                }
            }
            for c in 0..cols {
                if allow.get(r, c) {
                    data[r * cols + c] = F::from_f64((row[c].as_f64() - max).exp() / denom);
                }
            }
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(
            value,
            Op::MaskedSoftmaxRows {
                x: x.0,
                allow: allow.clone(),
            },
            rg,
        ))
    }

    /// Extract a contiguous column range.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        if start + width > cols {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of {cols} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&tx.data[r * cols + start..r * cols + start + width]);
        }
        let value = Tensor {
            shape: vec![rows, width],
            data,
        };
        let rg = self.needs_grad(&[x.0]);
        Ok(self.push(
            value,
            Op::SliceCols {
                x: x.0,
                start,
                width,
            },
            rg,
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].value.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                data.extend_from_slice(t.row(r));
            }
        }
        let value = Tensor {
            shape: vec![rows, total],
            data,
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(value, Op::ConcatCols { parts: ids }, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        let s: f64 = tx.data.iter().map(|v| v.as_f64()).sum();
        let value = Tensor::scalar(F::from_f64(s));
        let rg = self.needs_grad(&[x.0]);
        self.push(value, Op::Sum { x: x.0 }, rg)
    }

    /// Weighted sum of per-row cross-entropy terms, times `scale`.
    ///
    /// Returns the scalar loss node and the raw per-term negative
    /// log-likelihoods (unweighted, unscaled).
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        terms: Vec<CeTerm>,
        scale: f64,
    ) -> Result<(NodeId, Vec<f64>)> {
        let tl = &self.nodes[logits.0].value;
        let (rows, cols) = (tl.rows(), tl.cols());
        let mut nlls = Vec::with_capacity(terms.len());
        let mut total = 0.0;
        for term in &terms {
            if term.row >= rows {
                return Err(Error::InvalidArgument(format!(
                    "cross-entropy row {} out of {rows}",
                    term.row
                )));
            }
            if term.target >= cols {
                return Err(Error::TargetOutOfRange {
                    target: term.target,
                    vocab: cols,
                });
            }
            let row = &tl.data[term.row * cols..(term.row + 1) * cols];
            let nll = nll_row(row, term.target);
            nlls.push(nll);
            total += term.weight * nll;
        }
        let value = Tensor::scalar(F::from_f64(total * scale));
        let rg = self.needs_grad(&[logits.0]);
        let id = self.push(
            value,
            Op::CrossEntropyRows {
                logits: logits.0,
                terms,
                scale,
            },
            rg,
        );
        Ok((id, nlls))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let tl = &self.nodes[logits.0].value;
        if tl.rows() != 1 {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy expects a single logit row, got shape {:?}",
                tl.shape
            )));
        }
        let (id, _) = self.cross_entropy_rows(
            logits,
            vec![CeTerm {
                row: 0,
                target,
                weight: 1.0,
            }],
            1.0,
        )?;
        Ok(id)
    }

    /// Reverse sweep from a scalar loss; returns gradients for every node
    /// that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<F>> {
        let loss_t = &self.nodes[loss.0].value;
        if !loss_t.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_t.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let upstream = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_into_inputs(i, &upstream, &mut grads);
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_into_inputs(
        &self,
        node: usize,
        upstream: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let op = self.nodes[node].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.add_grad(a, upstream.clone(), grads);
                self.add_grad(b, upstream.clone(), grads);
            }
            Op::Mul { a, b } => {
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: upstream
                        .data
                        .iter()
                        .zip(&tb.data)
                        .map(|(&u, &y)| u * y)
                        .collect(),
                };
                let gb = Tensor {
                    shape: tb.shape.clone(),
                    data: upstream
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&u, &x)| u * x)
                        .collect(),
                };
                self.add_grad(a, ga, grads);
                self.add_grad(b, gb, grads);
            }
            Op::Scale { a, c } => {
                let k = F::from_f64(c);
                let ga = Tensor {
                    shape: upstream.shape.clone(),
                    data: upstream.data.iter().map(|&u| u * k).collect(),
                };
                self.add_grad(a, ga, grads);
            }
            Op::Matmul { a, b } => {
                // C = A.B  =>  dA = dC.B^T, dB = A^T.dC
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                self.add_grad(a, matmul_nt_raw(upstream, tb), grads);
                self.add_grad(b, matmul_tn_raw(ta, upstream), grads);
            }
            Op::MatmulNT { a, b } => {
                // C = A.B^T  =>  dA = dC.B, dB = dC^T.A
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                self.add_grad(a, matmul_raw(upstream, tb), grads);
                self.add_grad(b, matmul_tn_raw(upstream, ta), grads);
            }
            Op::AddRow { x, bias } => {
                self.add_grad(x, upstream.clone(), grads);
                let cols = self.nodes[x].value.cols();
                let mut gb = vec![F::zero(); cols];
                for (i, &u) in upstream.data.iter().enumerate() {
                    gb[i % cols] = gb[i % cols] + u;
                }
                self.add_grad(
                    bias,
                    Tensor {
                        shape: vec![cols],
                        data: gb,
                    },
                    grads,
                );
            }
            Op::MulRow { x, gain } => {
                let tx = &self.nodes[x].value;
                let tg = &self.nodes[gain].value;
                let cols = tx.cols();
                let gx = Tensor {
                    shape: tx.shape.clone(),
                    data: upstream
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &u)| u * tg.data[i % cols])
                        .collect(),
                };
                let mut gg = vec![F::zero(); cols];
                for (i, &u) in upstream.data.iter().enumerate() {
                    gg[i % cols] = gg[i % cols] + u * tx.data[i];
                }
                self.add_grad(x, gx, grads);
                self.add_grad(
                    gain,
                    Tensor {
                        shape: vec![cols],
                        data: gg,
                    },
                    grads,
                );
            }
            Op::Embed { table, ids } => {
                let tt = &self.nodes[table].value;
                let d = tt.shape[1];
                let mut gt = Tensor::zeros(&tt.shape);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        let v = gt.data[id * d + c] + upstream.data[r * d + c];
                        gt.data[id * d + c] = v;
                    }
                }
                self.add_grad(table, gt, grads);
            }
            Op::RmsNorm { x } => {
                let tx = &self.nodes[x].value;
                let (rows, cols) = (tx.rows(), tx.cols());
                let mut gx = Tensor::zeros(&tx.shape);
                for r in 0..rows {
                    let row = &tx.data[r * cols..(r + 1) * cols];
                    let urow = &upstream.data[r * cols..(r + 1) * cols];
                    let ms: f64 =
                        row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (ms + RMS_EPS).sqrt();
                    // y_i = x_i * inv; d inv/d x_j = -inv^3 * x_j / n
                    let dot: f64 = row
                        .iter()
                        .zip(urow)
                        .map(|(&xv, &uv)| xv.as_f64() * uv.as_f64())
                        .sum();
                    let k = inv * inv * inv * dot / cols as f64;
                    for c in 0..cols {
                        gx.data[r * cols + c] =
                            F::from_f64(urow[c].as_f64() * inv - row[c].as_f64() * k);
                    }
                }
                self.add_grad(x, gx, grads);
            }
            Op::Gelu { x } => {
                let tx = &self.nodes[x].value;
                let gx = Tensor {
                    shape: tx.shape.clone(),
                    data: tx
                        .data
                        .iter()
                        .zip(&upstream.data)
                        .map(|(&xv, &uv)| F::from_f64(uv.as_f64() * gelu_df(xv.as_f64())))
                        .collect(),
                };
                self.add_grad(x, gx, grads);
            }
            Op::MaskedSoftmaxRows { x, allow } => {
                let probs = &self.nodes[node].value;
                let (rows, cols) = (probs.rows(), probs.cols());
                let mut gx = Tensor::zeros(&probs.shape);
                for r in 0..rows {
                    let p = &probs.data[r * cols..(r + 1) * cols];
                    let u = &upstream.data[r * cols..(r + 1) * cols];
                    let dot: f64 = p
                        .iter()
                        .zip(u)
                        .map(|(&pv, &uv)| pv.as_f64() * uv.as_f64())
                        .sum();
                    for c in 0..cols {
                        if allow.get(r, c) {
                            gx.data[r * cols + c] =
                                F::from_f64(p[c].as_f64() * (u[c].as_f64() - dot));
                        }
                    }
                }
                self.add_grad(x, gx, grads);
            }
            Op::SliceCols { x, start, width } => {
                let tx = &self.nodes[x].value;
                let (rows, cols) = (tx.rows(), tx.cols());
                let mut gx = Tensor::zeros(&tx.shape);
                for r in 0..rows {
                    for c in 0..width {
                        gx.data[r * cols + start + c] = upstream.data[r * width + c];
                    }
                }
                self.add_grad(x, gx, grads);
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[parts[0]].value.rows();
                let total = upstream.cols();
                let mut offset = 0;
                for p in parts {
                    let t = &self.nodes[p].value;
                    let w = t.cols();
                    let mut gp = Tensor::zeros(&t.shape);
                    for r in 0..rows {
                        for c in 0..w {
                            gp.data[r * w + c] = upstream.data[r * total + offset + c];
                        }
                    }
                    offset += w;
                    self.add_grad(p, gp, grads);
                }
            }
            Op::Sum { x } => {
                let tx = &self.nodes[x].value;
                let u = upstream.data[0];
                let gx = Tensor {
                    shape: tx.shape.clone(),
                    data: vec![u; tx.numel()],
                };
                self.add_grad(x, gx, grads);
            }
            Op::CrossEntropyRows {
                logits,
                terms,
                scale,
            } => {
                let tl = &self.nodes[logits].value;
                let cols = tl.cols();
                let u = upstream.data[0].as_f64() * scale;
                let mut gl: Tensor<F> = Tensor::zeros(&tl.shape);
                for term in &terms {
                    let row = &tl.data[term.row * cols..(term.row + 1) * cols];
                    let probs = softmax_row(row);
                    let k = u * term.weight;
                    for c in 0..cols {
                        let delta = if c == term.target { 1.0 } else { 0.0 };
                        let v = gl.data[term.row * cols + c].as_f64() + k * (probs[c] - delta);
                        gl.data[term.row * cols + c] = F::from_f64(v);
                    }
                }
                self.add_grad(logits, gl, grads);
            }
        }
    }

    fn add_grad(&self, node: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        match &mut grads[node] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

fn matmul_raw<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `A[m,k] . B[n,k]^T -> [m,n]`.
fn matmul_nt_raw<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * n + j] = s;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `A[k,m]^T . B[k,n] -> [m,n]`.
fn matmul_tn_raw<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

fn gelu_f(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of one row, in f64.
pub fn softmax_row<F: Element>(row: &[F]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// `-log softmax(row)[target]` via the log-sum-exp identity, in f64.
pub fn nll_row<F: Element>(row: &[F], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    lse - row[target].as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eye = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let m = randn(&mut rng, &[3, 3]);
        let mut tape = Tape::new();
        let a = tape.leaf(eye, false);
        let b = tape.leaf(m.clone(), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), m.data());
    }

    #[test]
    fn matmul_one_by_one() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(), false);
        let b = tape.leaf(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap(), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).at(0), 6.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[4, 5]);
        let b = randn(&mut rng, &[5, 3]);
        // Independent brute-force reference.
        let mut expect = vec![0.0f64; 12];
        for i in 0..4 {
            for j in 0..3 {
                for p in 0..5 {
                    expect[i * 3 + j] += a.get(i, p) * b.get(p, j);
                }
            }
        }
        let mut tape = Tape::new();
        let na = tape.leaf(a, false);
        let nb = tape.leaf(b, false);
        let nc = tape.matmul(na, nb).unwrap();
        for (got, want) in tape.value(nc).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4, 2]), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn masked_softmax_uniform_and_single() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 4]), false);
        let allow = BoolMatrix::new(4, 4, true);
        let p = tape.masked_softmax_rows(x, &allow).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x2 = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap(), false);
        let mut allow2 = BoolMatrix::new(1, 2, false);
        allow2.set(0, 0, true);
        let p2 = tape.masked_softmax_rows(x2, &allow2).unwrap();
        assert_eq!(tape.value(p2).data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_matches_direct_formula() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let allow = BoolMatrix::new(1, 3, true);
        let p = tape.masked_softmax_rows(x, &allow).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (c, &v) in tape.value(p).data().iter().enumerate() {
            let want = ((c + 1) as f64).exp() / denom;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rejects_dead_row() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let mut allow = BoolMatrix::new(2, 2, true);
        allow.set(1, 0, false);
        allow.set(1, 1, false);
        match tape.masked_softmax_rows(x, &allow) {
            Err(Error::FullyMaskedRow { row: 1 }) => {}
            other => panic!("expected FullyMaskedRow, got {other:?}"),
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=16 {
            let x = randn(&mut rng, &[n, n]);
            let mut allow = BoolMatrix::new(n, n, false);
            for r in 0..n {
                for c in 0..n {
                    allow.set(r, c, rng.gen_bool(0.5));
                }
                // Keep rows alive.
                let forced = rng.gen_range(0..n);
                allow.set(r, forced, true);
            }
            let mut tape = Tape::new();
            let nx = tape.leaf(x, false);
            let p = tape.masked_softmax_rows(nx, &allow).unwrap();
            let probs = tape.value(p);
            for r in 0..n {
                let mut sum = 0.0;
                for c in 0..n {
                    let v = probs.get(r, c);
                    if !allow.get(r, c) {
                        assert_eq!(v, 0.0, "disallowed entry must be exactly zero");
                    }
                    sum += v;
                }
                assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 7]), false);
        let loss = tape.cross_entropy(logits, 3).unwrap();
        assert!((tape.value(loss).scalar_value() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_near_one_hot() {
        let mut tape: Tape<f64> = Tape::new();
        let mut t = Tensor::zeros(&[1, 5]);
        t.data_mut()[2] = 50.0;
        let logits = tape.leaf(t, false);
        let loss = tape.cross_entropy(logits, 2).unwrap();
        assert!(tape.value(loss).scalar_value() < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let loss = tape.cross_entropy(logits, 1).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let want = -(2f64.exp() / denom).ln();
        assert!((tape.value(loss).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4]), false);
        match tape.cross_entropy(logits, 4) {
            Err(Error::TargetOutOfRange { target: 4, vocab: 4 }) => {}
            other => panic!("expected TargetOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap(), true);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(p).unwrap().at(0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[2, 2]), true);
        match tape.backward(p) {
            Err(Error::NonScalarLoss { .. }) => {}
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, &[5, 4]);
        let b = randn(&mut rng, &[4, 6]);
        let run = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::new();
            let na = tape.leaf(a.clone(), false);
            let nb = tape.leaf(b.clone(), false);
            let c = tape.matmul(na, nb).unwrap();
            let g = tape.gelu(c);
            let n = tape.rms_norm(g);
            tape.value(n).data().to_vec()
        };
        let x = run(&a, &b);
        let y = run(&a, &b);
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
