//! Wengert-list reverse-mode autodiff.
//!
//! A `Tape` is built per forward pass: leaves enter via `param`/`constant`,
//! each op records a node with its parents and eagerly computed value, and
//! `backward` replays the list once in strict reverse order. Adjoints
//! accumulate by `+=` into per-node buffers, so fan-out sums correctly.
//! Nodes reachable only from constants skip adjoint work entirely; that is
//! what makes a frozen LM under adapter training cheap.
//!
//! A tape is single-threaded and single-use: one forward, one backward.

use super::{gelu, gelu_grad, softmax_in_place, Matrix, NumericsError, Result};

const LAYERNORM_EPS: f64 = 1e-5;

/// Index of a node on one specific tape. Ids from one tape are meaningless
/// on another; range checks catch out-of-range ids, shape checks catch most
/// of the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// (m×k)·(k×n)
    MatMul(NodeId, NodeId),
    /// a·bᵀ: (m×k)·(n×k) → m×n
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// a: m×n plus b: 1×n broadcast over rows
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    /// Gather rows of `a` at `indices`; backward scatter-adds.
    RowSelect {
        a: NodeId,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    SumAll(NodeId),
    /// Mean over masked positions of −log softmax(logits[i])[targets[i]].
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    adjoint: Option<Matrix>,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Rejects non-finite entries so a poisoned parameter
    /// fails at graph build, not three modules later.
    pub fn param(&mut self, value: &Matrix) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: "param" });
        }
        Ok(self.push(value.clone(), Op::Leaf, true))
    }

    /// Untracked leaf: no adjoint is ever computed for it or for subgraphs
    /// that depend only on constants.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Adjoint of `id` after `backward`; `None` if no gradient flowed there
    /// (constant, unreached, or backward not run).
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].adjoint.as_ref()
    }

    /// Adjoint or zeros of the node's shape: a parameter the loss does not
    /// depend on has gradient zero, not an error.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        match self.nodes[id.0].adjoint {
            Some(ref a) => a.clone(),
            None => {
                let (r, c) = self.nodes[id.0].value.shape();
                Matrix::zeros(r, c)
            }
        }
    }

    // ── op recording ──

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, ak) = self.checked_shape("matmul", a)?;
        let (bk, bn) = self.checked_shape("matmul", b)?;
        if ak != bk {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: (am, ak),
                right: (bk, bn),
            });
        }
        let mut out = Matrix::zeros(am, bn);
        acc_matmul(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            am,
            ak,
            bn,
        );
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, ak) = self.checked_shape("matmul_nt", a)?;
        let (bn, bk) = self.checked_shape("matmul_nt", b)?;
        if ak != bk {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: (am, ak),
                right: (bn, bk),
            });
        }
        let mut out = Matrix::zeros(am, bn);
        acc_matmul_nt(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            am,
            ak,
            bn,
        );
        Ok(self.push_op(out, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.checked_shape("add", a)?;
        let sb = self.checked_shape("add", b)?;
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += x;
        }
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    /// `a` (m×n) plus row vector `b` (1×n) broadcast over every row.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, an) = self.checked_shape("add_bias", a)?;
        let (br, bn) = self.checked_shape("add_bias", b)?;
        if br != 1 || bn != an {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: self.nodes[a.0].value.shape(),
                right: (br, bn),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        let bias = self.nodes[b.0].value.data();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bias) {
                *o += x;
            }
        }
        Ok(self.push_op(out, Op::AddBias(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.checked_shape("scale", a)?;
        if !c.is_finite() {
            return Err(NumericsError::NonFinite { op: "scale" });
        }
        let mut out = self.nodes[a.0].value.clone();
        for x in out.data_mut() {
            *x *= c;
        }
        Ok(self.push_op(out, Op::Scale(a, c)))
    }

    /// Softmax independently over each row. Zero-width rows are rejected.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, n) = self.checked_shape("softmax_rows", a)?;
        if n == 0 {
            return Err(NumericsError::EmptySoftmax);
        }
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.push_op(out, Op::SoftmaxRows(a)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                left: (0, 0),
                right: (0, 0),
            });
        }
        let (_, cols) = self.checked_shape("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.checked_shape("concat_rows", p)?;
            if pc != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: (pr, pc),
                });
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                left: (0, 0),
                right: (0, 0),
            });
        }
        let (rows, _) = self.checked_shape("concat_cols", parts[0])?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.checked_shape("concat_cols", p)?;
            if pr != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: (pr, pc),
                });
            }
            cols += pc;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let part = &self.nodes[p.0].value;
            for r in 0..rows {
                let src = part.row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
            }
            at += part.cols();
        }
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.checked_shape("slice_cols", a)?;
        if start + len > cols {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut out = Matrix::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r)
                .copy_from_slice(&self.nodes[a.0].value.row(r)[start..start + len]);
        }
        Ok(self.push_op(out, Op::SliceCols { a, start, len }))
    }

    /// Gather rows of `a` at `indices` (duplicates allowed); the gradient
    /// scatter-adds back, which is exactly an embedding-table lookup.
    pub fn row_select(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.checked_shape("row_select", a)?;
        for &i in indices {
            if i >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "row_select",
                    index: i,
                    bound: rows,
                });
            }
        }
        let mut out = Matrix::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.nodes[a.0].value.row(i));
        }
        Ok(self.push_op(
            out,
            Op::RowSelect {
                a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-row layernorm with learned gain and bias (both 1×n).
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, n) = self.checked_shape("layernorm", x)?;
        for &(v, name) in &[(gain, "layernorm"), (bias, "layernorm")] {
            let (vr, vn) = self.checked_shape(name, v)?;
            if vr != 1 || vn != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "layernorm",
                    left: (rows, n),
                    right: (vr, vn),
                });
            }
        }
        if n == 0 {
            return Err(NumericsError::EmptySoftmax);
        }
        let mut out = Matrix::zeros(rows, n);
        for r in 0..rows {
            let row = self.nodes[x.0].value.row(r);
            let (xhat, _) = normalize_row(row);
            let g = self.nodes[gain.0].value.data();
            let b = self.nodes[bias.0].value.data();
            for j in 0..n {
                out.row_mut(r)[j] = g[j] * xhat[j] + b[j];
            }
        }
        Ok(self.push_op(out, Op::LayerNorm { x, gain, bias }))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.checked_shape("gelu", a)?;
        let mut out = self.nodes[a.0].value.clone();
        for x in out.data_mut() {
            *x = gelu(*x);
        }
        Ok(self.push_op(out, Op::Gelu(a)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.checked_shape("sum_all", a)?;
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let out = Matrix::from_vec(1, 1, vec![s])?;
        Ok(self.push_op(out, Op::SumAll(a)))
    }

    /// Mean over `mask`-selected rows of −log softmax(logits[i])[targets[i]].
    /// The mask must select at least one position.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (rows, vocab) = self.checked_shape("cross_entropy", logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: (rows, vocab),
                right: (targets.len(), mask.len()),
            });
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(NumericsError::EmptyLossMask);
        }
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let probs = row_softmax(self.nodes[logits.0].value.row(r));
            total -= probs[targets[r]].max(f64::MIN_POSITIVE).ln();
        }
        let out = Matrix::from_vec(1, 1, vec![total / count as f64])?;
        Ok(self.push_op(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    // ── backward ──

    /// Reverse sweep from `loss` (must be 1×1). One sweep per tape; a second
    /// call errors rather than silently double-accumulating.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.checked_shape("backward", loss)?;
        if self.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(NumericsError::LossNotScalar(shape));
        }
        self.backward_done = true;
        self.nodes[loss.0].adjoint = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].adjoint.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.step_back(i)?;
        }
        Ok(())
    }

    fn step_back(&mut self, i: usize) -> Result<()> {
        // Adjoint is taken by value so parents can be mutated; it is written
        // back at the end. Ops only read values of their parents.
        let adj = self.nodes[i].adjoint.take().expect("checked by caller");
        // Ownership dance: the op description is immutable while we
        // accumulate into parents, so copy out the light parts first.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.shape();
                let n = self.nodes[b.0].value.cols();
                if self.needs(a) {
                    let mut da = self.take_adjoint(a);
                    acc_matmul_nt(da.data_mut(), adj.data(), self.nodes[b.0].value.data(), m, n, k);
                    self.nodes[a.0].adjoint = Some(da);
                }
                if self.needs(b) {
                    let mut db = self.take_adjoint(b);
                    acc_matmul_tn(db.data_mut(), self.nodes[a.0].value.data(), adj.data(), m, k, n);
                    self.nodes[b.0].adjoint = Some(db);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = self.nodes[a.0].value.shape();
                let n = self.nodes[b.0].value.rows();
                if self.needs(a) {
                    let mut da = self.take_adjoint(a);
                    acc_matmul(da.data_mut(), adj.data(), self.nodes[b.0].value.data(), m, n, k);
                    self.nodes[a.0].adjoint = Some(da);
                }
                if self.needs(b) {
                    let mut db = self.take_adjoint(b);
                    acc_matmul_tn(db.data_mut(), adj.data(), self.nodes[a.0].value.data(), m, n, k);
                    self.nodes[b.0].adjoint = Some(db);
                }
            }
            &Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs(id) {
                        let mut d = self.take_adjoint(id);
                        for (o, x) in d.data_mut().iter_mut().zip(adj.data()) {
                            *o += x;
                        }
                        self.nodes[id.0].adjoint = Some(d);
                    }
                }
            }
            &Op::AddBias(a, b) => {
                if self.needs(a) {
                    let mut d = self.take_adjoint(a);
                    for (o, x) in d.data_mut().iter_mut().zip(adj.data()) {
                        *o += x;
                    }
                    self.nodes[a.0].adjoint = Some(d);
                }
                if self.needs(b) {
                    let mut d = self.take_adjoint(b);
                    let n = d.cols();
                    for r in 0..adj.rows() {
                        let src = adj.row(r);
                        let dst = d.row_mut(0);
                        for j in 0..n {
                            dst[j] += src[j];
                        }
                    }
                    self.nodes[b.0].adjoint = Some(d);
                }
            }
            &Op::Scale(a, c) => {
                if self.needs(a) {
                    let mut d = self.take_adjoint(a);
                    for (o, x) in d.data_mut().iter_mut().zip(adj.data()) {
                        *o += c * x;
                    }
                    self.nodes[a.0].adjoint = Some(d);
                }
            }
            &Op::SoftmaxRows(a) => {
                if self.needs(a) {
                    let y = self.nodes[i].value.clone();
                    let mut d = self.take_adjoint(a);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let ar = adj.row(r);
                        let dot: f64 = yr.iter().zip(ar).map(|(y, a)| y * a).sum();
                        let dst = d.row_mut(r);
                        for j in 0..yr.len() {
                            dst[j] += yr[j] * (ar[j] - dot);
                        }
                    }
                    self.nodes[a.0].adjoint = Some(d);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let pr = self.nodes[p.0].value.rows();
                    if self.needs(p) {
                        let mut d = self.take_adjoint(p);
                        for r in 0..pr {
                            for (o, x) in d.row_mut(r).iter_mut().zip(adj.row(at + r)) {
                                *o += x;
                            }
                        }
                        self.nodes[p.0].adjoint = Some(d);
                    }
                    at += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut d = self.take_adjoint(p);
                        for r in 0..d.rows() {
                            let src = &adj.row(r)[at..at + pc];
                            for (o, x) in d.row_mut(r).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                        self.nodes[p.0].adjoint = Some(d);
                    }
                    at += pc;
                }
            }
            &Op::SliceCols { a, start, len } => {
                if self.needs(a) {
                    let mut d = self.take_adjoint(a);
                    for r in 0..adj.rows() {
                        let src = adj.row(r);
                        let dst = &mut d.row_mut(r)[start..start + len];
                        for (o, x) in dst.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                    self.nodes[a.0].adjoint = Some(d);
                }
            }
            Op::RowSelect { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                if self.needs(a) {
                    let mut d = self.take_adjoint(a);
                    for (r, &idx) in indices.iter().enumerate() {
                        for (o, x) in d.row_mut(idx).iter_mut().zip(adj.row(r)) {
                            *o += x;
                        }
                    }
                    self.nodes[a.0].adjoint = Some(d);
                }
            }
            &Op::LayerNorm { x, gain, bias } => {
                let n = self.nodes[x.0].value.cols();
                let rows = self.nodes[x.0].value.rows();
                let g = self.nodes[gain.0].value.clone();
                let xv = self.nodes[x.0].value.clone();
                if self.needs(gain) {
                    let mut d = self.take_adjoint(gain);
                    for r in 0..rows {
                        let (xhat, _) = normalize_row(xv.row(r));
                        for j in 0..n {
                            d.row_mut(0)[j] += adj.get(r, j) * xhat[j];
                        }
                    }
                    self.nodes[gain.0].adjoint = Some(d);
                }
                if self.needs(bias) {
                    let mut d = self.take_adjoint(bias);
                    for r in 0..rows {
                        for j in 0..n {
                            d.row_mut(0)[j] += adj.get(r, j);
                        }
                    }
                    self.nodes[bias.0].adjoint = Some(d);
                }
                if self.needs(x) {
                    let mut d = self.take_adjoint(x);
                    let nf = n as f64;
                    for r in 0..rows {
                        let (xhat, std) = normalize_row(xv.row(r));
                        // dxhat = adj ⊙ gain; dx via the usual layernorm pullback.
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; n];
                        for j in 0..n {
                            dxhat[j] = adj.get(r, j) * g.data()[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        mean_dxhat /= nf;
                        mean_dxhat_xhat /= nf;
                        let dst = d.row_mut(r);
                        for j in 0..n {
                            dst[j] += (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / std;
                        }
                    }
                    self.nodes[x.0].adjoint = Some(d);
                }
            }
            &Op::Gelu(a) => {
                if self.needs(a) {
                    let mut d = self.take_adjoint(a);
                    let xv = &self.nodes[a.0].value;
                    for (j, o) in d.data_mut().iter_mut().enumerate() {
                        *o += adj.data()[j] * gelu_grad(xv.data()[j]);
                    }
                    self.nodes[a.0].adjoint = Some(d);
                }
            }
            &Op::SumAll(a) => {
                if self.needs(a) {
                    let s = adj.get(0, 0);
                    let mut d = self.take_adjoint(a);
                    for o in d.data_mut() {
                        *o += s;
                    }
                    self.nodes[a.0].adjoint = Some(d);
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                if self.needs(logits) {
                    let scale = adj.get(0, 0) / mask.iter().filter(|m| **m).count() as f64;
                    let mut d = self.take_adjoint(logits);
                    for r in 0..mask.len() {
                        if !mask[r] {
                            continue;
                        }
                        let probs = row_softmax(self.nodes[logits.0].value.row(r));
                        let dst = d.row_mut(r);
                        for j in 0..probs.len() {
                            let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                            dst[j] += scale * (probs[j] - indicator);
                        }
                    }
                    self.nodes[logits.0].adjoint = Some(d);
                }
            }
        }
        self.nodes[i].adjoint = Some(adj);
        Ok(())
    }

    // ── internals ──

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            adjoint: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op) -> NodeId {
        let needs = op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn take_adjoint(&mut self, id: NodeId) -> Matrix {
        let (r, c) = self.nodes[id.0].value.shape();
        self.nodes[id.0]
            .adjoint
            .take()
            .unwrap_or_else(|| Matrix::zeros(r, c))
    }

    fn checked_shape(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        if id.0 >= self.nodes.len() {
            return Err(NumericsError::ForeignNode { op });
        }
        Ok(self.nodes[id.0].value.shape())
    }
}

fn op_parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::Add(a, b) | Op::AddBias(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::SoftmaxRows(a)
        | Op::Gelu(a)
        | Op::SumAll(a)
        | Op::SliceCols { a, .. }
        | Op::RowSelect { a, .. } => vec![*a],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// (xhat, std) for one row under population variance and LAYERNORM_EPS.
fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    let std = (var + LAYERNORM_EPS).sqrt();
    (row.iter().map(|x| (x - mu) / std).collect(), std)
}

fn row_softmax(row: &[f64]) -> Vec<f64> {
    let mut v = row.to_vec();
    softmax_in_place(&mut v);
    v
}

// ── matmul kernels (all accumulate with +=) ──

/// out(m×n) += a(m×k) · b(k×n)
fn acc_matmul(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out(m×n) += a(m×k) · b(n×k)ᵀ
fn acc_matmul_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            orow[j] += acc;
        }
    }
}

/// out(k×n) += a(m×k)ᵀ · b(m×n)
fn acc_matmul_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.constant(m(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &m(2, 2, &[58.0, 64.0, 139.0, 154.0]));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 3, &[1.0, -2.0, 0.5, 3.0, 1.0, -1.0]));
        let bt = m(4, 3, &[1.0, 0.0, 2.0, -1.0, 1.0, 0.0, 0.5, 0.5, 0.5, 2.0, -2.0, 1.0]);
        let b = t.constant(bt.clone());
        let c = t.matmul_nt(a, b).unwrap();
        let b2 = t.constant(bt.transpose());
        let c2 = t.matmul(a, b2).unwrap();
        assert!(t.value(c).max_abs_diff(t.value(c2)).unwrap() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn backward_of_sum_matmul_is_outer_ones() {
        // loss = sum(W·x) ⇒ ∂loss/∂W = ones · xᵀ.
        let mut t = Tape::new();
        let w = t.param(&m(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])).unwrap();
        let x = t.constant(m(3, 1, &[1.0, 2.0, 3.0]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &m(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
    }

    #[test]
    fn detached_param_gets_zero_grad() {
        let mut t = Tape::new();
        let used = t.param(&m(1, 1, &[2.0])).unwrap();
        let unused = t.param(&m(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let loss = t.sum_all(used).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(unused).is_none());
        assert_eq!(t.grad_or_zeros(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::new();
        let p = t.param(&m(1, 1, &[1.0])).unwrap();
        let loss = t.sum_all(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.backward(loss), Err(NumericsError::BackwardTwice));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let p = t.param(&m(2, 1, &[1.0, 2.0])).unwrap();
        assert_eq!(t.backward(p), Err(NumericsError::LossNotScalar((2, 1))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(p) + sum(p) ⇒ grad = 2·ones.
        let mut t = Tape::new();
        let p = t.param(&m(1, 2, &[3.0, -1.0])).unwrap();
        let s = t.add(p, p).unwrap();
        let loss = t.sum_all(s).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap(), &m(1, 2, &[2.0, 2.0]));
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // Two positions, second masked out. Uniform logits over 4 classes
        // give −log(1/4) = ln 4 at the counted position.
        let mut t = Tape::new();
        let logits = t.constant(Matrix::zeros(2, 4));
        let loss = t
            .cross_entropy(logits, &[1, 3], &[true, false])
            .unwrap();
        assert!((t.value(loss).get(0, 0) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut t = Tape::new();
        let logits = t.constant(Matrix::zeros(2, 4));
        assert_eq!(
            t.cross_entropy(logits, &[0, 0], &[false, false]),
            Err(NumericsError::EmptyLossMask)
        );
    }

    #[test]
    fn constants_do_not_get_adjoints() {
        let mut t = Tape::new();
        let c = t.constant(m(1, 2, &[1.0, 2.0]));
        let p = t.param(&m(2, 1, &[1.0, 1.0])).unwrap();
        let y = t.matmul(c, p).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(c).is_none());
        assert!(t.grad(p).is_some());
    }

    // ── finite-difference checks, one per primitive ──

    /// Central-difference gradient of `f` at `x0`, perturbing every entry.
    fn fd_grad(x0: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x0.rows(), x0.cols());
        for j in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[j] += h;
            let mut minus = x0.clone();
            minus.data_mut()[j] -= h;
            g.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &Matrix, fd: &Matrix, tol: f64, what: &str) {
        let diff = analytic.max_abs_diff(fd).unwrap();
        let scale = fd.max_abs().max(1.0);
        assert!(
            diff / scale < tol,
            "{what}: max diff {diff} (scale {scale})\nanalytic {analytic:?}\nfd {fd:?}"
        );
    }

    /// Deterministic pseudo-random fill, good enough for gradient probes.
    fn fill(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).max(1);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            data.push((state as f64 / u64::MAX as f64) * 2.0 - 1.0);
        }
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn every_primitive_passes_finite_difference() {
        type Builder = dyn Fn(&mut Tape, NodeId) -> NodeId;
        // Each case: input shape and a scalar-valued graph over one param.
        let cases: Vec<(&str, (usize, usize), Box<Builder>)> = vec![
            ("matmul_lhs", (3, 4), Box::new(|t, p| {
                let b = t.constant(fill(4, 2, 7));
                let y = t.matmul(p, b).unwrap();
                t.sum_all(y).unwrap()
            })),
            ("matmul_rhs", (4, 2), Box::new(|t, p| {
                let a = t.constant(fill(3, 4, 8));
                let y = t.matmul(a, p).unwrap();
                t.sum_all(y).unwrap()
            })),
            ("matmul_nt_lhs", (3, 4), Box::new(|t, p| {
                let b = t.constant(fill(2, 4, 9));
                let y = t.matmul_nt(p, b).unwrap();
                t.sum_all(y).unwrap()
            })),
            ("matmul_nt_rhs", (2, 4), Box::new(|t, p| {
                let a = t.constant(fill(3, 4, 10));
                let y = t.matmul_nt(a, p).unwrap();
                t.sum_all(y).unwrap()
            })),
            ("add", (2, 3), Box::new(|t, p| {
                let b = t.constant(fill(2, 3, 11));
                let y = t.add(p, b).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("add_bias", (1, 4), Box::new(|t, p| {
                let a = t.constant(fill(3, 4, 12));
                let y = t.add_bias(a, p).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("scale", (2, 2), Box::new(|t, p| {
                let y = t.scale(p, -1.7).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("softmax_rows", (2, 5), Box::new(|t, p| {
                let s = t.softmax_rows(p).unwrap();
                // Weight the probabilities so the gradient is non-trivial.
                let w = t.constant(fill(5, 1, 13));
                let y = t.matmul(s, w).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("concat_rows", (2, 3), Box::new(|t, p| {
                let b = t.constant(fill(1, 3, 14));
                let y = t.concat_rows(&[p, b]).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("concat_cols", (2, 2), Box::new(|t, p| {
                let b = t.constant(fill(2, 3, 15));
                let y = t.concat_cols(&[b, p]).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("slice_cols", (2, 5), Box::new(|t, p| {
                let y = t.slice_cols(p, 1, 3).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("row_select", (4, 3), Box::new(|t, p| {
                let y = t.row_select(p, &[2, 0, 2]).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("layernorm_x", (3, 4), Box::new(|t, p| {
                let g = t.constant(fill(1, 4, 16));
                let b = t.constant(fill(1, 4, 17));
                let y = t.layernorm(p, g, b).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("layernorm_gain", (1, 4), Box::new(|t, p| {
                let x = t.constant(fill(3, 4, 18));
                let b = t.constant(fill(1, 4, 19));
                let y = t.layernorm(x, p, b).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("layernorm_bias", (1, 4), Box::new(|t, p| {
                let x = t.constant(fill(3, 4, 20));
                let g = t.constant(fill(1, 4, 21));
                let y = t.layernorm(x, g, p).unwrap();
                let y2 = t.gelu(y).unwrap();
                t.sum_all(y2).unwrap()
            })),
            ("gelu", (2, 3), Box::new(|t, p| {
                let y = t.gelu(p).unwrap();
                t.sum_all(y).unwrap()
            })),
            ("cross_entropy", (3, 5), Box::new(|t, p| {
                t.cross_entropy(p, &[4, 1, 2], &[true, false, true]).unwrap()
            })),
        ];

        for (name, shape, build) in cases {
            let x0 = fill(shape.0, shape.1, 42);
            let run = |x: &Matrix| {
                let mut t = Tape::new();
                let p = t.param(x).unwrap();
                let loss = build(&mut t, p);
                t.value(loss).get(0, 0)
            };
            let fd = fd_grad(&x0, &run);
            let mut t = Tape::new();
            let p = t.param(&x0).unwrap();
            let loss = build(&mut t, p);
            t.backward(loss).unwrap();
            assert_close(&t.grad_or_zeros(p), &fd, 1e-6, name);
        }
    }
}
