use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Log2OnePlus,
    Exp,
    Sigmoid,
    LeakyRelu,
    RowSoftmax,
    ColSoftmax,
    Sum,
    Mean,
    ConcatCols,
    ConcatRows,
    RowGather,
    SegmentMean,
    SegmentSoftmax,
    AddRowBroadcast,
    MulColBroadcast,
    Scale,
    AddScalar,
    ClampMin,
    Reshape,
    Transpose,
    SliceCols,
    SliceRows,
    ColSum,
    RowSum,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        f.write_str(&s)
    }
}

/// Assignment of rows to groups, used by segment reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    ids: Vec<usize>,
    counts: Vec<usize>,
}

impl Segments {
    pub fn new(ids: Vec<usize>, n_segments: usize) -> Result<Self> {
        let mut counts = vec![0; n_segments];
        for &s in &ids {
            if s >= n_segments {
                return Err(Error::invalid(format!(
                    "segment id {s} out of range for {n_segments} segments"
                )));
            }
            counts[s] += 1;
        }
        Ok(Segments { ids, counts })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn n_segments(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Log2OnePlus(Var),
    Exp(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    RowSoftmax(Var),
    ColSoftmax(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowGather(Var, Arc<Vec<usize>>),
    SegmentMean(Var, Arc<Segments>),
    SegmentSoftmax(Var, Arc<Segments>),
    AddRowBroadcast(Var, Var),
    MulColBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Reshape(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ColSum(Var),
    RowSum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Log2OnePlus(_) => OpKind::Log2OnePlus,
            Op::Exp(_) => OpKind::Exp,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::RowSoftmax(_) => OpKind::RowSoftmax,
            Op::ColSoftmax(_) => OpKind::ColSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::RowGather(..) => OpKind::RowGather,
            Op::SegmentMean(..) => OpKind::SegmentMean,
            Op::SegmentSoftmax(..) => OpKind::SegmentSoftmax,
            Op::AddRowBroadcast(..) => OpKind::AddRowBroadcast,
            Op::MulColBroadcast(..) => OpKind::MulColBroadcast,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ColSum(_) => OpKind::ColSum,
            Op::RowSum(_) => OpKind::RowSum,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation. Nodes are appended in evaluation
/// order, so reverse append order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients of a scalar root with respect to every recorded value that
/// depends on a parameter.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn softmax_slice(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negative-control hook for gradient checking: every backward rule of
    /// `kind` on this tape is scaled by 1.5.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Moves a value out, leaving an empty tensor behind. Only for leaves
    /// whose tape is about to be dropped.
    pub(crate) fn take_value(&mut self, var: Var) -> Tensor {
        std::mem::take(&mut self.nodes[var.0].value)
    }

    /// Side of the breakpoint of every LeakyReLU and clamp input. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (input, at) = match node.op {
                Op::LeakyRelu(a, _) => (a, 0.0),
                Op::ClampMin(a, floor) => (a, floor),
                _ => continue,
            };
            out.extend(self.nodes[input.0].value.data().iter().map(|&x| x > at));
        }
        out
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite output from {}",
                op.kind()
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, kind: OpKind, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{kind}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.kind(), a, b)?;
        let value = zip_map(self.value(a), self.value(b), f);
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul: inner dimensions {m}x{k} * {k2}x{n} differ"
            )));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            out.data_mut(),
        );
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `log2(1 + a)`, accurate for small `a`.
    pub fn log2_one_plus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log2OnePlus(a), |x| {
            x.ln_1p() / std::f64::consts::LN_2
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), crate::mec::sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_slice(out.row_mut(r));
        }
        self.push(out, Op::RowSoftmax(a), &[a])
    }

    pub fn col_softmax(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).transpose();
        for r in 0..t.rows() {
            softmax_slice(t.row_mut(r));
        }
        self.push(t.transpose(), Op::ColSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column sums, `R x C -> 1 x C`.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).col_sums();
        self.push(Tensor::row_vector(&s), Op::ColSum(a), &[a])
    }

    /// Row sums, `R x C -> R x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).row_sums();
        self.push(Tensor::column(&s), Op::RowSum(a), &[a])
    }

    /// Horizontal concatenation (the `||` operator on row-aligned blocks).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols: no inputs"));
        };
        let rows = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::invalid("concat_cols: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, out)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows: no inputs"));
        };
        let cols = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::invalid("concat_rows: column counts differ"));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(rows, cols, out)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out[r] = src[index[r]]`.
    pub fn row_gather(&mut self, src: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.shape(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "row_gather: index {bad} out of range {n}"
            )));
        }
        let s = self.value(src);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(s.row(i));
        }
        let value = Tensor::from_vec(index.len(), c, out)?;
        self.push(value, Op::RowGather(src, index), &[src])
    }

    /// Mean of the rows in each segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Var, segments: Arc<Segments>) -> Result<Var> {
        let (l, c) = self.shape(a);
        if segments.ids().len() != l {
            return Err(Error::invalid(
                "segment_mean: segment ids do not match rows",
            ));
        }
        let t = self.value(a);
        let mut out = Tensor::zeros(segments.n_segments(), c);
        for (r, &s) in segments.ids().iter().enumerate() {
            for (o, v) in out.row_mut(s).iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for (s, &count) in segments.counts().iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                out.row_mut(s).iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.push(out, Op::SegmentMean(a, segments), &[a])
    }

    /// Softmax of a score column within each segment.
    pub fn segment_softmax(&mut self, a: Var, segments: Arc<Segments>) -> Result<Var> {
        let (l, c) = self.shape(a);
        if c != 1 || segments.ids().len() != l {
            return Err(Error::invalid(
                "segment_softmax: expects an L x 1 column matching the segment ids",
            ));
        }
        let x = self.value(a).data();
        let mut max = vec![f64::NEG_INFINITY; segments.n_segments()];
        for (r, &s) in segments.ids().iter().enumerate() {
            max[s] = max[s].max(x[r]);
        }
        let mut out: Vec<f64> = segments
            .ids()
            .iter()
            .enumerate()
            .map(|(r, &s)| (x[r] - max[s]).exp())
            .collect();
        let mut sum = vec![0.0; segments.n_segments()];
        for (r, &s) in segments.ids().iter().enumerate() {
            sum[s] += out[r];
        }
        for (r, &s) in segments.ids().iter().enumerate() {
            out[r] /= sum[s];
        }
        let value = Tensor::from_vec(l, 1, out)?;
        self.push(value, Op::SegmentSoftmax(a, segments), &[a])
    }

    /// Adds the `1 x C` row `b` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(Error::invalid(format!(
                "add_row_broadcast: {r}x{c} with {:?}",
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        let row = self.value(b).data();
        for i in 0..r {
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(out, Op::AddRowBroadcast(a, b), &[a, b])
    }

    /// Multiplies row `i` of `a` by `s[i]`, with `s` an `R x 1` column.
    pub fn mul_col_broadcast(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(s) != (r, 1) {
            return Err(Error::invalid(format!(
                "mul_col_broadcast: {r}x{c} with {:?}",
                self.shape(s)
            )));
        }
        let mut out = self.value(a).clone();
        let col = self.value(s).data();
        for (i, &k) in col.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::MulColBroadcast(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(rows, cols)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + width > c {
            return Err(Error::invalid(format!(
                "slice_cols: {start}..{} out of {c} columns",
                start + width
            )));
        }
        let t = self.value(a);
        let value = Tensor::from_fn(r, width, |i, j| t.get(i, start + j));
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + count > r {
            return Err(Error::invalid(format!(
                "slice_rows: {start}..{} out of {r} rows",
                start + count
            )));
        }
        let data = self.value(a).data()[start * c..(start + count) * c].to_vec();
        let value = Tensor::from_vec(count, c, data)?;
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.data_mut().iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let (r, c) = node.value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, s) in gb.data_mut().iter_mut().zip(g.data()) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gi / bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    for (((d, gi), yi), bi) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(y.data())
                        .zip(vb.data())
                    {
                        *d -= gi * yi / bi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.shape();
                let n = vb.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G * B^T
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        vb.data(),
                        true,
                        1.0,
                        ga.data_mut(),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = A^T * G
                    gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        true,
                        g.data(),
                        false,
                        1.0,
                        gb.data_mut(),
                    );
                }
            }
            Op::Log2OnePlus(a) => {
                let va = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    let ln2 = std::f64::consts::LN_2;
                    for ((d, gi), x) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gi / ((1.0 + x) * ln2);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), x) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += if *x > 0.0 { *gi } else { gi * slope };
                    }
                }
            }
            Op::RowSoftmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, yi), gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::ColSoftmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let (rows, cols) = y.shape();
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| y.get(r, c) * g.get(r, c)).sum();
                        for r in 0..rows {
                            let v = ga.get(r, c) + y.get(r, c) * (g.get(r, c) - dot);
                            ga.set(r, c, v);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g.data()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let g0 = g.data()[0] / n;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::ColSum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..ga.rows() {
                        for (d, gi) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, gi) in g.data().iter().enumerate() {
                        ga.row_mut(r).iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..g.rows() {
                            let src = &g.row(r)[offset..offset + width];
                            for (d, s) in gp.row_mut(r).iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (d, s) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[offset..offset + len])
                        {
                            *d += s;
                        }
                    }
                    offset += len;
                    debug_assert_eq!(len % cols.max(1), 0);
                }
            }
            Op::RowGather(src, index) => {
                if let Some(gs) = self.slot(grads, *src) {
                    for (r, &i) in index.iter().enumerate() {
                        for (d, s) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SegmentMean(a, segments) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &s) in segments.ids().iter().enumerate() {
                        let inv = 1.0 / segments.counts()[s] as f64;
                        for (d, gi) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, segments) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let mut dot = vec![0.0; segments.n_segments()];
                    for (r, &s) in segments.ids().iter().enumerate() {
                        dot[s] += y.data()[r] * g.data()[r];
                    }
                    for (r, &s) in segments.ids().iter().enumerate() {
                        ga.data_mut()[r] += y.data()[r] * (g.data()[r] - dot[s]);
                    }
                }
            }
            Op::AddRowBroadcast(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, s) in gb.data_mut().iter_mut().zip(g.col_sums()) {
                        *d += s;
                    }
                }
            }
            Op::MulColBroadcast(a, s) => {
                let (va, vs) = (self.value(*a), self.value(*s));
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &k) in vs.data().iter().enumerate() {
                        for (d, gi) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += gi * k;
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for r in 0..va.rows() {
                        let dot: f64 = va.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                        gs.data_mut()[r] += dot;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += k * gi;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let va = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), x) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if *x > *floor {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, &g.transpose());
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let c = g.cols();
                    let dst = &mut ga.data_mut()[start * c..start * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut tape = Tape::new();
        let a = tape.constant(t(1, 2, &[0.0, 0.0]));
        let s = tape.row_softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(a, 0.01).unwrap();
        assert_eq!(tape.scalar(y), -0.01);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.37 - 0.6);
        let b = Tensor::from_fn(4, 2, |r, c| ((r * 2 + c * 5) % 7) as f64 * 0.21 - 0.4);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((tape.value(c).get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(t(1, 3, &[0.3, -0.2, 0.9]));
        let x = tape.constant(t(1, 3, &[1.5, 2.0, -4.0]));
        let wx = tape.mul(w, x).unwrap();
        let root = tape.sum(wx).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.5, 2.0, -4.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 2));
        let b = tape.param(Tensor::zeros(2, 3));
        assert!(matches!(tape.add(a, b), Err(Error::InvalidArgument(_))));
        assert!(matches!(tape.matmul(b, a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(-2.0));
        match tape.log2_one_plus(a) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("log2_one_plus"), "{msg}"),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn segment_softmax_normalizes_each_group() {
        let seg = Arc::new(Segments::new(vec![0, 1, 0, 1, 1], 2).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(t(5, 1, &[0.1, -2.0, 3.0, 0.5, 0.0]));
        let s = tape.segment_softmax(a, seg).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_fn(3, 3, |r, c| (r as f64 - c as f64) * 0.3));
        let s = tape.row_softmax(w).unwrap();
        let e = tape.exp(s).unwrap();
        let root = tape.sum(e).unwrap();
        let g1 = tape.backward(root).unwrap();
        let g2 = tape.backward(root).unwrap();
        assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
    }
}
