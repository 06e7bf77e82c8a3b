//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Tape` records every operation of one forward pass as a node holding the
//! cached forward value. Nodes are appended in creation order, so the tape is
//! a DAG in topological order and `backward` is a single reverse sweep.
//! Tapes are built per forward pass and discarded afterwards; a tape belongs
//! to one thread.
//!
//! The operation set is exactly what the reference transformer and the
//! merging objectives need: no general broadcasting, no higher-order
//! derivatives. Elementwise broadcasting is restricted to a 1-D row vector
//! applied along the last axis (the `coefficients ⊙ activations` case).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// A tensor plus a trainable flag. Frozen parameters never receive gradient
/// buffers and are never updated by optimizers.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn trainable(tensor: Tensor) -> Self {
        Parameter { tensor, trainable: true }
    }

    pub fn frozen(tensor: Tensor) -> Self {
        Parameter { tensor, trainable: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceAxis {
    /// Reduce every element to a scalar.
    All,
    /// Reduce along the last axis, keeping it with extent 1.
    Last,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Elementwise { kind: ElementwiseKind, a: NodeId, b: NodeId, broadcast: bool },
    Scale { x: NodeId, factor: f64 },
    RowSoftmax { x: NodeId },
    RowLogSoftmax { x: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, eps: f64 },
    Silu { x: NodeId },
    Abs { x: NodeId },
    Sqrt { x: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    SelectPerRow { x: NodeId, ids: Vec<usize> },
    ReduceSum { x: NodeId, axis: ReduceAxis },
    ReduceMean { x: NodeId, axis: ReduceAxis },
    Reshape { x: NodeId },
    Transpose { x: NodeId },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Accumulates across `backward` calls; only allocated when the node
    /// requires gradients.
    grad: Option<Tensor>,
    requires_grad: bool,
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

    pub fn leaf(&mut self, tensor: Tensor, trainable: bool) -> NodeId {
        self.push(Op::Leaf, tensor, trainable)
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor, false)
    }

    pub fn parameter(&mut self, param: &Parameter) -> NodeId {
        self.leaf(param.tensor.clone(), param.trainable)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, if the node required one and `backward` ran.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        let rg = self.requires(inputs);
        Ok(self.push(op, value, rg))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_checked(Op::Matmul { a, b }, value, &[a, b], "matmul")
    }

    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: ElementwiseKind) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if kind != ElementwiseKind::Div
            && vb.shape().len() == 1
            && vb.cols() == va.cols()
        {
            true
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                detail: format!("{:?} {kind:?} {:?}", va.shape(), vb.shape()),
            });
        };
        let f = |x: f64, y: f64| match kind {
            ElementwiseKind::Add => x + y,
            ElementwiseKind::Sub => x - y,
            ElementwiseKind::Mul => x * y,
            ElementwiseKind::Div => x / y,
        };
        let cols = va.cols();
        let data: Vec<f64> = if broadcast {
            va.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb.data()[i % cols]))
                .collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked(Op::Elementwise { kind, a, b, broadcast }, value, &[a, b], "elementwise")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElementwiseKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElementwiseKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElementwiseKind::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElementwiseKind::Div)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.value(x).scale(factor)?;
        self.push_checked(Op::Scale { x, factor }, value, &[x], "scale")
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked(Op::RowSoftmax { x }, value, &[x], "row_softmax")
    }

    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (j, &v) in row.iter().enumerate() {
                data[r * cols + j] = v - max - log_sum;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked(Op::RowLogSoftmax { x }, value, &[x], "row_log_softmax")
    }

    /// Per row: `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("rms_norm eps must be >= 0, got {eps}")));
        }
        let (vx, vg) = (self.value(x), self.value(gain));
        let (rows, cols) = (vx.rows(), vx.cols());
        if vg.shape().len() != 1 || vg.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                detail: format!("gain {:?} for input {:?}", vg.shape(), vx.shape()),
            });
        }
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            // Overflow in the mean square would silently zero the row.
            if !ms.is_finite() {
                return Err(Error::NonFinite { op: "rms_norm" });
            }
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..cols {
                data[r * cols + j] = row[j] * inv * vg.data()[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked(Op::RmsNorm { x, gain, eps }, value, &[x, gain], "rms_norm")
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked(Op::Silu { x }, value, &[x], "silu")
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.abs()).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked(Op::Abs { x }, value, &[x], "abs")
    }

    /// Elementwise square root. The derivative is unbounded at 0; callers
    /// keep inputs strictly positive.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.sqrt()).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push_checked(Op::Sqrt { x }, value, &[x], "sqrt")
    }

    /// Row lookup: output row i is `table[ids[i], :]`. Backward scatter-adds
    /// into the table gradient.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding_gather",
                detail: format!("table must be 2-D, got {:?}", vt.shape()),
            });
        }
        let (vocab, dim) = (vt.shape()[0], vt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding_gather: empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&vt.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        self.push_checked(Op::Gather { table, ids: ids.to_vec() }, value, &[table], "embedding_gather")
    }

    /// Per matrix-view row r, pick `x[r, ids[r]]`; output is 1-D of length
    /// rows. Backward scatters into the picked positions.
    pub fn select_per_row(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if ids.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "select_per_row",
                detail: format!("{} ids for {rows} rows", ids.len()),
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(Error::InvalidArgument(format!(
                    "select_per_row: column {id} out of range {cols}"
                )));
            }
            data.push(vx.data()[r * cols + id]);
        }
        let value = Tensor::new(vec![rows], data)?;
        self.push_checked(Op::SelectPerRow { x, ids: ids.to_vec() }, value, &[x], "select_per_row")
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: ReduceAxis) -> Result<NodeId> {
        let value = self.reduce_value(x, axis, false);
        self.push_checked(Op::ReduceSum { x, axis }, value?, &[x], "reduce_sum")
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: ReduceAxis) -> Result<NodeId> {
        let value = self.reduce_value(x, axis, true);
        self.push_checked(Op::ReduceMean { x, axis }, value?, &[x], "reduce_mean")
    }

    /// Validates a caller-supplied axis index: only the last axis (or `None`
    /// for a full reduction) is supported.
    pub fn reduce_axis_for(&self, x: NodeId, axis: Option<usize>) -> Result<ReduceAxis> {
        match axis {
            None => Ok(ReduceAxis::All),
            Some(i) if i + 1 == self.value(x).shape().len() => Ok(ReduceAxis::Last),
            Some(i) => Err(Error::InvalidArgument(format!(
                "invalid reduce axis {i} for shape {:?}; only the last axis is supported",
                self.value(x).shape()
            ))),
        }
    }

    fn reduce_value(&self, x: NodeId, axis: ReduceAxis, mean: bool) -> Result<Tensor> {
        let vx = self.value(x);
        match axis {
            ReduceAxis::All => {
                let mut s = vx.data().iter().sum::<f64>();
                if mean {
                    s /= vx.numel() as f64;
                }
                Tensor::new(vec![1], vec![s])
            }
            ReduceAxis::Last => {
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut data = Vec::with_capacity(rows);
                for r in 0..rows {
                    let mut s = vx.data()[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    if mean {
                        s /= cols as f64;
                    }
                    data.push(s);
                }
                let mut shape = vx.shape().to_vec();
                *shape.last_mut().expect("non-empty shape") = 1;
                Tensor::new(shape, data)
            }
        }
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", vx.shape(), shape),
            });
        }
        let value = Tensor::new(shape, vx.data().to_vec())?;
        self.push_checked(Op::Reshape { x }, value, &[x], "reshape")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("expected 2-D, got {:?}", vx.shape()),
            });
        }
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        let value = Tensor::new(vec![n, m], transpose_raw(vx.data(), m, n))?;
        self.push_checked(Op::Transpose { x }, value, &[x], "transpose")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if start >= end || end > rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{end} of {rows}"),
            });
        }
        let value = Tensor::new(vec![end - start, cols], vx.data()[start * cols..end * cols].to_vec())?;
        self.push_checked(Op::SliceRows { x, start }, value, &[x], "slice_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if start >= end || end > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{end} of {cols}"),
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, width], data)?;
        self.push_checked(Op::SliceCols { x, start }, value, &[x], "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows: no parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {cols}", vp.cols()),
                });
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push_checked(Op::ConcatRows { parts: parts.to_vec() }, value, parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols: no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {rows}", self.value(p).rows()),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let vp = self.value(p);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&vp.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push_checked(Op::ConcatCols { parts: parts.to_vec() }, value, parts, "concat_cols")
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// into per-node buffers, so calling `backward` twice doubles them.
    /// Frozen-only graphs allocate no gradient buffers.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(Tensor::scalar(1.0)?);

        for id in (0..=root.0).rev() {
            let Some(g) = local[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut local);
            // Fold into the persistent accumulator.
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, local: &mut [Option<Tensor>]) {
        let add_to = |local: &mut [Option<Tensor>], target: NodeId, shape: &[usize], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            let slot = &mut local[target.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(shape.to_vec()));
            }
            f(slot.as_mut().expect("just initialized").data_mut());
        };

        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = G · Bᵀ
                add_to(local, *a, va.shape(), &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * vb.data()[p * n + j];
                            }
                        }
                    }
                });
                // dB = Aᵀ · G
                add_to(local, *b, vb.shape(), &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                });
            }

            Op::Elementwise { kind, a, b, broadcast } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let cols = va.cols();
                match kind {
                    ElementwiseKind::Add => {
                        add_to(local, *a, va.shape(), &mut |da| {
                            for (d, gv) in da.iter_mut().zip(g.data()) {
                                *d += gv;
                            }
                        });
                        add_to(local, *b, vb.shape(), &mut |db| {
                            if *broadcast {
                                for (i, gv) in g.data().iter().enumerate() {
                                    db[i % cols] += gv;
                                }
                            } else {
                                for (d, gv) in db.iter_mut().zip(g.data()) {
                                    *d += gv;
                                }
                            }
                        });
                    }
                    ElementwiseKind::Sub => {
                        add_to(local, *a, va.shape(), &mut |da| {
                            for (d, gv) in da.iter_mut().zip(g.data()) {
                                *d += gv;
                            }
                        });
                        add_to(local, *b, vb.shape(), &mut |db| {
                            if *broadcast {
                                for (i, gv) in g.data().iter().enumerate() {
                                    db[i % cols] -= gv;
                                }
                            } else {
                                for (d, gv) in db.iter_mut().zip(g.data()) {
                                    *d -= gv;
                                }
                            }
                        });
                    }
                    ElementwiseKind::Mul => {
                        add_to(local, *a, va.shape(), &mut |da| {
                            if *broadcast {
                                for (i, gv) in g.data().iter().enumerate() {
                                    da[i] += gv * vb.data()[i % cols];
                                }
                            } else {
                                for i in 0..da.len() {
                                    da[i] += g.data()[i] * vb.data()[i];
                                }
                            }
                        });
                        add_to(local, *b, vb.shape(), &mut |db| {
                            if *broadcast {
                                for (i, gv) in g.data().iter().enumerate() {
                                    db[i % cols] += gv * va.data()[i];
                                }
                            } else {
                                for i in 0..db.len() {
                                    db[i] += g.data()[i] * va.data()[i];
                                }
                            }
                        });
                    }
                    ElementwiseKind::Div => {
                        add_to(local, *a, va.shape(), &mut |da| {
                            for i in 0..da.len() {
                                da[i] += g.data()[i] / vb.data()[i];
                            }
                        });
                        add_to(local, *b, vb.shape(), &mut |db| {
                            for i in 0..db.len() {
                                let bv = vb.data()[i];
                                db[i] -= g.data()[i] * va.data()[i] / (bv * bv);
                            }
                        });
                    }
                }
            }

            Op::Scale { x, factor } => {
                let vx = self.value(*x);
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(g.data()) {
                        *d += gv * factor;
                    }
                });
            }

            Op::RowSoftmax { x } => {
                let p = &self.nodes[id].value;
                let (rows, cols) = (p.rows(), p.cols());
                add_to(local, *x, p.shape(), &mut |dx| {
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|j| g.data()[base + j] * p.data()[base + j]).sum();
                        for j in 0..cols {
                            dx[base + j] += p.data()[base + j] * (g.data()[base + j] - dot);
                        }
                    }
                });
            }

            Op::RowLogSoftmax { x } => {
                let y = &self.nodes[id].value;
                let (rows, cols) = (y.rows(), y.cols());
                add_to(local, *x, y.shape(), &mut |dx| {
                    for r in 0..rows {
                        let base = r * cols;
                        let gsum: f64 = g.data()[base..base + cols].iter().sum();
                        for j in 0..cols {
                            let p = y.data()[base + j].exp();
                            dx[base + j] += g.data()[base + j] - p * gsum;
                        }
                    }
                });
            }

            Op::RmsNorm { x, gain, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let (rows, cols) = (vx.rows(), vx.cols());
                let d = cols as f64;
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for r in 0..rows {
                        let base = r * cols;
                        let row = &vx.data()[base..base + cols];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
                        let s = (ms + eps).sqrt();
                        let proj: f64 = (0..cols)
                            .map(|j| g.data()[base + j] * vg.data()[j] * row[j])
                            .sum();
                        for j in 0..cols {
                            dx[base + j] +=
                                g.data()[base + j] * vg.data()[j] / s - row[j] * proj / (d * s * s * s);
                        }
                    }
                });
                add_to(local, *gain, vg.shape(), &mut |dg| {
                    for r in 0..rows {
                        let base = r * cols;
                        let row = &vx.data()[base..base + cols];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
                        let s = (ms + eps).sqrt();
                        for j in 0..cols {
                            dg[j] += g.data()[base + j] * row[j] / s;
                        }
                    }
                });
            }

            Op::Silu { x } => {
                let vx = self.value(*x);
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for i in 0..dx.len() {
                        let v = vx.data()[i];
                        let s = sigmoid(v);
                        dx[i] += g.data()[i] * s * (1.0 + v * (1.0 - s));
                    }
                });
            }

            Op::Abs { x } => {
                let vx = self.value(*x);
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g.data()[i] * sign(vx.data()[i]);
                    }
                });
            }

            Op::Sqrt { x } => {
                let y = &self.nodes[id].value;
                let vx = self.value(*x);
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g.data()[i] * 0.5 / y.data()[i];
                    }
                });
            }

            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let dim = vt.shape()[1];
                add_to(local, *table, vt.shape(), &mut |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] += g.data()[i * dim + j];
                        }
                    }
                });
            }

            Op::SelectPerRow { x, ids } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for (r, &id) in ids.iter().enumerate() {
                        dx[r * cols + id] += g.data()[r];
                    }
                });
            }

            Op::ReduceSum { x, axis } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                add_to(local, *x, vx.shape(), &mut |dx| match axis {
                    ReduceAxis::All => {
                        let gv = g.data()[0];
                        for d in dx.iter_mut() {
                            *d += gv;
                        }
                    }
                    ReduceAxis::Last => {
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d += g.data()[i / cols];
                        }
                    }
                });
            }

            Op::ReduceMean { x, axis } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let numel = vx.numel();
                add_to(local, *x, vx.shape(), &mut |dx| match axis {
                    ReduceAxis::All => {
                        let gv = g.data()[0] / numel as f64;
                        for d in dx.iter_mut() {
                            *d += gv;
                        }
                    }
                    ReduceAxis::Last => {
                        for (i, d) in dx.iter_mut().enumerate() {
                            *d += g.data()[i / cols] / cols as f64;
                        }
                    }
                });
            }

            Op::Reshape { x } => {
                let vx = self.value(*x);
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
            }

            Op::Transpose { x } => {
                let vx = self.value(*x);
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                add_to(local, *x, vx.shape(), &mut |dx| {
                    // g has shape [n, m]
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] += g.data()[i * m + j];
                        }
                    }
                });
            }

            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let offset = start * cols;
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for (i, gv) in g.data().iter().enumerate() {
                        dx[offset + i] += gv;
                    }
                });
            }

            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let width = g.cols();
                add_to(local, *x, vx.shape(), &mut |dx| {
                    for r in 0..g.rows() {
                        for j in 0..width {
                            dx[r * cols + start + j] += g.data()[r * width + j];
                        }
                    }
                });
            }

            Op::ConcatRows { parts } => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let r = vp.rows();
                    let band = g.data()[row * cols..(row + r) * cols].to_vec();
                    add_to(local, p, vp.shape(), &mut |dp| {
                        for (d, gv) in dp.iter_mut().zip(&band) {
                            *d += gv;
                        }
                    });
                    row += r;
                }
            }

            Op::ConcatCols { parts } => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    let off = offset;
                    add_to(local, p, vp.shape(), &mut |dp| {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g.data()[r * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
