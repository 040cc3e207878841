//! Dense 2-D `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Everything trainable in this crate is expressed through the operations
//! here. A [`Tape`] records one forward computation; [`Tape::backward`]
//! replays it in exact reverse order and accumulates gradients additively
//! into every leaf that was registered with `requires_grad = true`.
//!
//! Layout is row-major, values are always `f64`. Row vectors are 1×N
//! tensors and scalars are 1×1; there is no broadcasting beyond the
//! explicit bias-row operation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probabilities are clamped here before the log inside cross-entropy.
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not fill {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// 1×N row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// 1×1 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1×1 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// self += other * scale (shapes must match).
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

/// out += a · b
fn matmul_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out += a · bᵀ
fn matmul_nt_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let brow = &b.data[j * b.cols..(j + 1) * b.cols];
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            out.data[i * b.rows + j] += acc;
        }
    }
}

/// out += aᵀ · b
fn matmul_tn_acc(out: &mut Tensor, a: &Tensor, b: &Tensor) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let arow = &a.data[k * a.cols..(k + 1) * a.cols];
        let brow = &b.data[k * n..(k + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aki * brow[j];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(usize, usize),
    MatmulNt(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    AddBiasRows(usize, usize),
    AffineRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SelectRow(usize, usize),
    Tanh(usize),
    LayerNormRows(usize),
    SoftmaxRows(usize),
    MaskedSoftmaxRows(usize, Vec<bool>),
    MeanRows(usize),
    SumAll(usize),
    CosineSimilarity(usize, usize),
    CrossEntropy(usize, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation for reverse-mode differentiation.
///
/// A tape is owned by exactly one forward/backward pass; dropping it leaves
/// all source tensors untouched (leaves hold copies).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_events: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Takes the gradient out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_node[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cross-entropy evaluations that hit the probability clamp.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a source tensor. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// a · b
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols != tb.rows {
            return Err(Error::Shape(format!(
                "matmul {} by {}",
                ta.shape_str(),
                tb.shape_str()
            )));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        matmul_acc(&mut out, ta, tb);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::Matmul(a.0, b.0), ng))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols != tb.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {} by {}",
                ta.shape_str(),
                tb.shape_str()
            )));
        }
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        matmul_nt_acc(&mut out, ta, tb);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::MatmulNt(a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(Error::Shape(format!(
                "add {} to {}",
                ta.shape_str(),
                tb.shape_str()
            )));
        }
        let mut out = ta.clone();
        out.add_scaled(tb, 1.0);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v *= factor;
        }
        let ng = self.needs(a.0);
        self.push(out, Op::Scale(a.0, factor), ng)
    }

    /// Adds a 1×C bias row to every row of a R×C matrix.
    pub fn add_bias_rows(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(Error::Shape(format!(
                "bias row {} against {}",
                tb.shape_str(),
                ta.shape_str()
            )));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tb.data[c];
            }
        }
        let ng = self.needs(a.0) || self.needs(bias.0);
        Ok(self.push(out, Op::AddBiasRows(a.0, bias.0), ng))
    }

    /// Column-wise affine map applied to every row: y = x ⊙ gain + bias,
    /// with `gain` and `bias` 1×C.
    pub fn affine_rows(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ta, tg, tb) = (
            &self.nodes[a.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        if tg.rows != 1 || tb.rows != 1 || tg.cols != ta.cols || tb.cols != ta.cols {
            return Err(Error::Shape(format!(
                "affine_rows gain {} bias {} against {}",
                tg.shape_str(),
                tb.shape_str(),
                ta.shape_str()
            )));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                let i = r * out.cols + c;
                out.data[i] = out.data[i] * tg.data[c] + tb.data[c];
            }
        }
        let ng = self.needs(a.0) || self.needs(gain.0) || self.needs(bias.0);
        Ok(self.push(out, Op::AffineRows(a.0, gain.0, bias.0), ng))
    }

    /// Horizontal concatenation; all inputs must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero tensors".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows;
        let mut cols = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {} vs {rows} rows",
                    t.rows
                )));
            }
            cols += t.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols]
                    .copy_from_slice(t.row_slice(r));
            }
            offset += t.cols;
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Vertical stacking; all inputs must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero tensors".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols;
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols != cols {
                return Err(Error::Shape(format!(
                    "concat_rows col mismatch: {} vs {cols} cols",
                    t.cols
                )));
            }
            rows += t.rows;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            out.data[offset..offset + t.data.len()].copy_from_slice(&t.data);
            offset += t.data.len();
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if start >= end || end > ta.cols {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} of {}",
                ta.shape_str()
            )));
        }
        let mut out = Tensor::zeros(ta.rows, end - start);
        for r in 0..ta.rows {
            out.data[r * (end - start)..(r + 1) * (end - start)]
                .copy_from_slice(&ta.row_slice(r)[start..end]);
        }
        let ng = self.needs(a.0);
        Ok(self.push(out, Op::SliceCols(a.0, start), ng))
    }

    /// Row `r` as a 1×C tensor.
    pub fn select_row(&mut self, a: Var, r: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if r >= ta.rows {
            return Err(Error::Shape(format!(
                "select_row {r} of {}",
                ta.shape_str()
            )));
        }
        let out = Tensor::row(ta.row_slice(r).to_vec());
        let ng = self.needs(a.0);
        Ok(self.push(out, Op::SelectRow(a.0, r), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for v in out.data.iter_mut() {
            *v = libm::tanh(*v);
        }
        let ng = self.needs(a.0);
        self.push(out, Op::Tanh(a.0), ng)
    }

    /// Per-row layer normalization (no affine part; compose with
    /// [`Tape::affine_rows`] when gain/bias are wanted).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let ng = self.needs(a.0);
        self.push(out, Op::LayerNormRows(a.0), ng)
    }

    fn softmax_row(row: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    /// Per-row softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..out.rows {
            Self::softmax_row(&mut out.data[r * out.cols..(r + 1) * out.cols]);
        }
        let ng = self.needs(a.0);
        self.push(out, Op::SoftmaxRows(a.0), ng)
    }

    /// Per-row softmax with masked columns forced to exactly zero; the rest
    /// renormalize. `mask[c] = true` means column `c` participates.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if mask.len() != ta.cols {
            return Err(Error::Shape(format!(
                "mask length {} against {} columns",
                mask.len(),
                ta.cols
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Numeric("masked softmax with no valid columns".into()));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (v, &m) in row.iter_mut().zip(mask.iter()) {
                if m {
                    *v = libm::exp(*v - max);
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            for (v, &m) in row.iter_mut().zip(mask.iter()) {
                if m {
                    *v /= sum;
                }
            }
        }
        let ng = self.needs(a.0);
        Ok(self.push(out, Op::MaskedSoftmaxRows(a.0, mask.to_vec()), ng))
    }

    /// Column means over rows as a 1×C tensor.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(1, ta.cols);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                out.data[c] += ta.get(r, c);
            }
        }
        for v in out.data.iter_mut() {
            *v /= ta.rows as f64;
        }
        let ng = self.needs(a.0);
        self.push(out, Op::MeanRows(a.0), ng)
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let ng = self.needs(a.0);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), ng)
    }

    /// Cosine similarity of two equal-length row vectors, as a 1×1 tensor.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows != 1 || tb.rows != 1 || ta.cols != tb.cols {
            return Err(Error::Shape(format!(
                "cosine_similarity {} with {}",
                ta.shape_str(),
                tb.shape_str()
            )));
        }
        let (na, nb) = (norm(&ta.data), norm(&tb.data));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Numeric("cosine similarity of zero-norm vector".into()));
        }
        let c = dot(&ta.data, &tb.data) / (na * nb);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::scalar(c), Op::CosineSimilarity(a.0, b.0), ng))
    }

    /// −Σₖ targetₖ ln(max(pₖ, clamp)) for a 1×K probability row and a
    /// one-hot target. Clamp hits are counted on the tape.
    pub fn cross_entropy(&mut self, probs: Var, target: &[f64]) -> Result<Var> {
        let tp = &self.nodes[probs.0].value;
        if tp.rows != 1 || tp.cols != target.len() {
            return Err(Error::Shape(format!(
                "cross_entropy probs {} against target length {}",
                tp.shape_str(),
                target.len()
            )));
        }
        let mut loss = 0.0;
        for (p, y) in tp.data.iter().zip(target.iter()) {
            if *y != 0.0 {
                let mut pv = *p;
                if pv < CROSS_ENTROPY_CLAMP {
                    pv = CROSS_ENTROPY_CLAMP;
                    self.clamp_events += 1;
                }
                loss -= y * libm::log(pv);
            }
        }
        let ng = self.needs(probs.0);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(probs.0, target.to_vec()), ng))
    }

    /// Runs reverse accumulation from a 1×1 loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.rows != 1 || lt.cols != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {}",
                lt.shape_str()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_node(id, &g, &mut grads);
            // Leaves keep their gradient; interior results are transient.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    matmul_nt_acc(&mut da, g, tb);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    matmul_tn_acc(&mut db, ta, g);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatmulNt(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    matmul_acc(&mut da, g, tb);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    matmul_tn_acc(&mut db, g, ta);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    for v in da.data.iter_mut() {
                        *v *= f;
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::AddBiasRows(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AffineRows(a, gain, bias) => {
                let (ta, tg) = (&self.nodes[*a].value, &self.nodes[*gain].value);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        for c in 0..da.cols {
                            da.data[r * da.cols + c] *= tg.data[c];
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*gain) {
                    let mut dg = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dg.data[c] += g.get(r, c) * ta.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            dp.data[r * t.cols..(r + 1) * t.cols]
                                .copy_from_slice(&g.row_slice(r)[offset..offset + t.cols]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += t.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    if self.needs(p) {
                        let dp = Tensor {
                            rows: t.rows,
                            cols: t.cols,
                            data: g.data[offset..offset + t.data.len()].to_vec(),
                        };
                        self.accumulate(grads, p, dp);
                    }
                    offset += t.data.len();
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            da.data[r * ta.cols + start + c] = g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::SelectRow(a, r) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    da.data[r * ta.cols..(r + 1) * ta.cols].copy_from_slice(&g.data);
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let mut da = g.clone();
                    for (d, yv) in da.data.iter_mut().zip(y.data.iter()) {
                        *d *= 1.0 - yv * yv;
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::LayerNormRows(a) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    let n = ta.cols as f64;
                    for r in 0..ta.rows {
                        let xrow = ta.row_slice(r);
                        let yrow = y.row_slice(r);
                        let grow = g.row_slice(r);
                        let mean = xrow.iter().sum::<f64>() / n;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                        let gmean = grow.iter().sum::<f64>() / n;
                        let gymean = grow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(gv, yv)| gv * yv)
                            .sum::<f64>()
                            / n;
                        let drow = &mut da.data[r * ta.cols..(r + 1) * ta.cols];
                        for c in 0..ta.cols {
                            drow[c] = inv * (grow[c] - gmean - yrow[c] * gymean);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let mut da = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yrow = y.row_slice(r);
                        let grow = g.row_slice(r);
                        let inner: f64 =
                            yrow.iter().zip(grow.iter()).map(|(yv, gv)| yv * gv).sum();
                        let drow = &mut da.data[r * y.cols..(r + 1) * y.cols];
                        for c in 0..y.cols {
                            drow[c] = yrow[c] * (grow[c] - inner);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::MaskedSoftmaxRows(a, mask) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let mut da = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yrow = y.row_slice(r);
                        let grow = g.row_slice(r);
                        let inner: f64 = yrow
                            .iter()
                            .zip(grow.iter())
                            .zip(mask.iter())
                            .filter(|(_, &m)| m)
                            .map(|((yv, gv), _)| yv * gv)
                            .sum();
                        let drow = &mut da.data[r * y.cols..(r + 1) * y.cols];
                        for c in 0..y.cols {
                            drow[c] = if mask[c] {
                                yrow[c] * (grow[c] - inner)
                            } else {
                                0.0
                            };
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    let inv = 1.0 / ta.rows as f64;
                    for r in 0..ta.rows {
                        for c in 0..ta.cols {
                            da.data[r * ta.cols + c] = g.data[c] * inv;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for v in da.data.iter_mut() {
                        *v = g.data[0];
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::CosineSimilarity(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (na, nb) = (norm(&ta.data), norm(&tb.data));
                let c = self.nodes[id].value.data[0];
                let gv = g.data[0];
                if self.needs(*a) {
                    let mut da = Tensor::zeros(1, ta.cols);
                    for i in 0..ta.cols {
                        da.data[i] =
                            gv * (tb.data[i] / (na * nb) - c * ta.data[i] / (na * na));
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(1, tb.cols);
                    for i in 0..tb.cols {
                        db.data[i] =
                            gv * (ta.data[i] / (na * nb) - c * tb.data[i] / (nb * nb));
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::CrossEntropy(a, target) => {
                if self.needs(*a) {
                    let tp = &self.nodes[*a].value;
                    let gv = g.data[0];
                    let mut da = Tensor::zeros(1, tp.cols);
                    for (i, y) in target.iter().enumerate() {
                        if *y != 0.0 {
                            let p = tp.data[i];
                            if p >= CROSS_ENTROPY_CLAMP {
                                da.data[i] = -gv * y / p;
                            }
                            // below the clamp the loss is locally flat in p
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
        }
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst error.
    pub worst: Option<(usize, usize)>,
    /// Number of coordinates checked.
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `params` are the tensors the scalar function reads; `analytic[i]` is the
/// already-computed gradient for `params[i]` (`None` is treated as zero).
/// Every coordinate of every parameter is perturbed by ±`eps`, the function
/// re-evaluated, and the relative error computed with a 1e-8 denominator
/// floor. Parameters are restored bit-exactly afterwards.
pub fn grad_check<F>(
    params: &mut [Tensor],
    analytic: &[Option<Tensor>],
    mut f: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for pi in 0..params.len() {
        for ci in 0..params[pi].len() {
            let saved = params[pi].data[ci];
            params[pi].data[ci] = saved + eps;
            let up = f(params)?;
            params[pi].data[ci] = saved - eps;
            let down = f(params)?;
            params[pi].data[ci] = saved;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value in grad_check at param {pi} coord {ci}"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].as_ref().map_or(0.0, |t| t.data[ci]);
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-8);
            let rel = libm::fabs(a - numeric) / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}


#[cfg(test)]
mod dbgln {
    use super::*;
    use crate::rng::{standard_normal, substream};
    use rand::Rng;

    #[test]
    fn dbg_trial_36() {
        let mut rng = substream(42, "layer_norm");
        for trial in 0..40u64 {
            let rows = rng.gen_range(1..4);
            let cols = rng.gen_range(2..6);
            let x = loop {
                let data: alloc::vec::Vec<f64> = (0..rows*cols).map(|_| standard_normal(&mut rng)).collect();
                let t = Tensor::from_vec(rows, cols, data).unwrap();
                let ok = (0..rows).all(|r| {
                    let row = t.row_slice(r);
                    let mean = row.iter().sum::<f64>() / row.len() as f64;
                    let var = row.iter().map(|v| (v-mean)*(v-mean)).sum::<f64>() / row.len() as f64;
                    var > 0.25
                });
                if ok { break t; }
            };
            let mut probe_rng = substream(42 + trial, "probe");
            let probe = Tensor::row((0..cols).map(|_| standard_normal(&mut probe_rng)).collect());
            let f = |p: &Tensor| -> f64 {
                let mut t = Tape::new();
                let v = t.leaf(p.clone(), false);
                let out = t.layer_norm_rows(v);
                let zeros = t.constant(Tensor::zeros(1, cols));
                let gain = t.constant(probe.clone());
                let w = t.affine_rows(out, gain, zeros).unwrap();
                let sq = t.tanh(w);
                let loss = t.sum_all(sq);
                t.value(loss).scalar_value()
            };
            if trial != 36 { continue; }
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let out = tape.layer_norm_rows(v);
            let zeros = tape.constant(Tensor::zeros(1, cols));
            let gain = tape.constant(probe.clone());
            let w = tape.affine_rows(out, gain, zeros).unwrap();
            let sq = tape.tanh(w);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(v).unwrap().clone();
            std::println!("rows {rows} cols {cols} x {:?}", x.data());
            let mut xp = x.clone();
            for i in 0..xp.len() {
                let saved = xp.data()[i];
                for eps in [1e-4, 1e-5, 1e-6] {
                    xp.data_mut()[i] = saved + eps;
                    let up = f(&xp);
                    xp.data_mut()[i] = saved - eps;
                    let dn = f(&xp);
                    xp.data_mut()[i] = saved;
                    let num = (up-dn)/(2.0*eps);
                    let a = analytic.data()[i];
                    let rel = (a-num).abs()/a.abs().max(num.abs()).max(1e-8);
                    std::println!("coord {i} eps {eps:.0e} analytic {a:.9e} numeric {num:.9e} rel {rel:.3e}");
                }
            }
        }
    }
}
