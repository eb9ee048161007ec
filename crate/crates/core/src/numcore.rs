//! Tape-based reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! Every value is a 2-D `f64` matrix; vectors are `1×n` rows and scalars are
//! `1×1`. Operations are recorded on a [`Tape`] as they execute, and
//! [`Tape::backward`] walks the tape once in reverse to accumulate exact
//! gradients for every node that depends on a differentiable leaf.
//!
//! ```
//! use itpp::numcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::row(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// `(rows, cols)`.
pub type Shape = (usize, usize);

/// Epsilon added to the row variance in [`Tape::layernorm_rows`].
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Shape),
    #[error("variable was recorded on a different tape")]
    ForeignVar,
}

/// A dense row-major matrix of `f64` detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if rows * cols != data.len() {
            return Err(NumError::InvalidArgument {
                op: "tensor",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`]. Cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node_id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    LinComb(Vec<(usize, f64)>),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    SliceFlat(usize, usize),
    SoftmaxRows(usize),
    LayerNormRows(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Define-by-run record of a computation. Single writer.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable nodes.
    pub fn get_or_zeros(&self, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.len()])
    }
}

fn check_same(op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating into `out`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id,
            rows,
            cols,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn owned(&self, v: Var) -> Result<(), NumError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(NumError::ForeignVar);
        }
        Ok(())
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let (r, c) = t.shape();
        self.push(t.data, r, c, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = t.shape();
        self.push(t.data, r, c, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    /// Value of a `1×1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.id];
        Tensor {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_same("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, a.rows, a.cols, Op::Add(a.id, b.id), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_same("sub", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, a.rows, a.cols, Op::Sub(a.id, b.id), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_same("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, a.rows, a.cols, Op::Mul(a.id, b.id), rg))
    }

    /// `a + row` with `row` (1×c) added to every row of `a` (r×c).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(NumError::ShapeMismatch {
                op: "add_row",
                lhs: a.shape(),
                rhs: row.shape(),
            });
        }
        let c = a.cols;
        let rv = self.value(row);
        let v = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % c])
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, a.rows, a.cols, Op::AddRow(a.id, row.id), rg))
    }

    /// `a ⊙ row` with `row` (1×c) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(NumError::ShapeMismatch {
                op: "mul_row",
                lhs: a.shape(),
                rhs: row.shape(),
            });
        }
        let c = a.cols;
        let rv = self.value(row);
        let v = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i % c])
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, a.rows, a.cols, Op::MulRow(a.id, row.id), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        if a.cols != b.rows {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, m, n, Op::MatMul(a.id, b.id), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        if a.cols != b.cols {
            return Err(NumError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (m, k, n) = (a.rows, a.cols, b.rows);
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, m, n, Op::MatMulNT(a.id, b.id), rg))
    }

    /// `Σ cᵢ·xᵢ` over equally shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var, NumError> {
        let Some(&(first, _)) = terms.first() else {
            return Err(NumError::InvalidArgument {
                op: "lin_comb",
                detail: "no terms".into(),
            });
        };
        let mut out = vec![0.0; first.len()];
        let mut rg = false;
        for &(v, c) in terms {
            check_same("lin_comb", first, v)?;
            for (o, x) in out.iter_mut().zip(self.value(v)) {
                *o += c * x;
            }
            rg |= self.rg(v);
        }
        let ids = terms.iter().map(|&(v, c)| (v.id, c)).collect();
        Ok(self.push(out, first.rows, first.cols, Op::LinComb(ids), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(v, a.rows, a.cols, Op::Scale(a.id, c), rg)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(v, a.rows, a.cols, Op::Offset(a.id), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(v, a.rows, a.cols, Op::Tanh(a.id), rg)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| softplus(x)).collect();
        let rg = self.rg(a);
        self.push(v, a.rows, a.cols, Op::Softplus(a.id), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(v, a.rows, a.cols, Op::Exp(a.id), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(v, a.rows, a.cols, Op::Log(a.id), rg)
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], 1, 1, Op::Sum(a.id), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>() / a.len() as f64;
        let rg = self.rg(a);
        self.push(vec![s], 1, 1, Op::Mean(a.id), rg)
    }

    /// Stacks inputs with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(first) = parts.first() else {
            return Err(NumError::InvalidArgument {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let cols = first.cols;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            if p.cols != cols {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            out.extend_from_slice(self.value(p));
            rows += p.rows;
            rg |= self.rg(p);
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(out, rows, cols, Op::ConcatRows(ids), rg))
    }

    /// `[a | b]` for inputs with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        if a.rows != b.rows {
            return Err(NumError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let cols = a.cols + b.cols;
        let mut out = Vec::with_capacity(a.rows * cols);
        let (av, bv) = (self.value(a), self.value(b));
        for r in 0..a.rows {
            out.extend_from_slice(&av[r * a.cols..(r + 1) * a.cols]);
            out.extend_from_slice(&bv[r * b.cols..(r + 1) * b.cols]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, a.rows, cols, Op::ConcatCols(a.id, b.id), rg))
    }

    /// Contiguous row-major window of `a` starting at flat `offset`, viewed
    /// as a `rows×cols` matrix. Covers row slicing and reshaping.
    pub fn slice(&mut self, a: Var, offset: usize, rows: usize, cols: usize) -> Result<Var, NumError> {
        if offset + rows * cols > a.len() {
            return Err(NumError::InvalidArgument {
                op: "slice",
                detail: format!(
                    "window {offset}+{}x{} exceeds {:?}",
                    rows,
                    cols,
                    a.shape()
                ),
            });
        }
        let v = self.value(a)[offset..offset + rows * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(v, rows, cols, Op::SliceFlat(a.id, offset), rg))
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        if start + len > a.rows {
            return Err(NumError::InvalidArgument {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {:?}", start + len, a.shape()),
            });
        }
        self.slice(a, start * a.cols, len, a.cols)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumError> {
        if rows * cols != a.len() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape(),
                rhs: (rows, cols),
            });
        }
        self.slice(a, 0, rows, cols)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let c = a.cols;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, a.rows, a.cols, Op::SoftmaxRows(a.id), rg)
    }

    /// Per-row standardization `(x − mean) / sqrt(var + ε)` without affine
    /// terms; `var` is the population variance.
    pub fn layernorm_rows(&mut self, a: Var) -> Var {
        let c = a.cols;
        let mut out = self.value(a).to_vec();
        let mut inv = Vec::with_capacity(a.rows);
        for row in out.chunks_mut(c.max(1)) {
            let n = row.len() as f64;
            let m = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - m) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(a);
        self.push(out, a.rows, a.cols, Op::LayerNormRows(a.id, inv), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        self.owned(loss)?;
        if loss.shape() != (1, 1) {
            return Err(NumError::NotScalar(loss.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Runs `$body` with the gradient accumulator of input `$i`, allocated
        // on first touch; skipped when the input needs no gradient.
        macro_rules! with_acc {
            ($i:expr, |$buf:ident| $body:block) => {
                let i = $i;
                if nodes[i].requires_grad {
                    let $buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]);
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_acc!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sub(a, b) => {
                with_acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_acc!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                with_acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                with_acc!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, r) => {
                let c = node.cols;
                with_acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_acc!(*r, |gr| {
                    for (i, y) in g.iter().enumerate() {
                        gr[i % c] += y;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let c = node.cols;
                let (av, rv) = (&nodes[*a].value, &nodes[*r].value);
                with_acc!(*a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * rv[i % c];
                    }
                });
                with_acc!(*r, |gr| {
                    for (i, y) in g.iter().enumerate() {
                        gr[i % c] += y * av[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (m, k, n) = (na.rows, na.cols, nb.cols);
                // dA = G·Bᵀ, dB = Aᵀ·G
                with_acc!(*a, |ga| {
                    gemm_nt_acc(g, &nb.value, ga, m, n, k);
                });
                with_acc!(*b, |gb| {
                    gemm_tn_acc(&na.value, g, gb, m, k, n);
                });
            }
            Op::MatMulNT(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (m, k, n) = (na.rows, na.cols, nb.rows);
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                with_acc!(*a, |ga| {
                    gemm_acc(g, &nb.value, ga, m, n, k);
                });
                with_acc!(*b, |gb| {
                    gemm_tn_acc(g, &na.value, gb, m, n, k);
                });
            }
            Op::LinComb(terms) => {
                for &(i, c) in terms {
                    with_acc!(i, |gi| {
                        gi.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                    });
                }
            }
            Op::Scale(a, c) => {
                with_acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                });
            }
            Op::Offset(a) => {
                with_acc!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Tanh(a) => {
                let out = &node.value;
                with_acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Softplus(a) => {
                let av = &nodes[*a].value;
                with_acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(av[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.value;
                with_acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = &nodes[*a].value;
                with_acc!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Sum(a) => {
                with_acc!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                with_acc!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    with_acc!(p, |gp| {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    });
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (nodes[*a].cols, nodes[*b].cols);
                let c = ca + cb;
                with_acc!(*a, |ga| {
                    for r in 0..node.rows {
                        for j in 0..ca {
                            ga[r * ca + j] += g[r * c + j];
                        }
                    }
                });
                with_acc!(*b, |gb| {
                    for r in 0..node.rows {
                        for j in 0..cb {
                            gb[r * cb + j] += g[r * c + ca + j];
                        }
                    }
                });
            }
            Op::SliceFlat(a, off) => {
                let off = *off;
                with_acc!(*a, |ga| {
                    ga[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let y = &node.value;
                with_acc!(*a, |ga| {
                    for r in 0..node.rows {
                        let s = r * c;
                        let dot: f64 = (0..c).map(|j| g[s + j] * y[s + j]).sum();
                        for j in 0..c {
                            ga[s + j] += y[s + j] * (g[s + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, inv) => {
                let c = node.cols;
                let n = c as f64;
                let y = &node.value;
                with_acc!(*a, |ga| {
                    for r in 0..node.rows {
                        let s = r * c;
                        let sg: f64 = g[s..s + c].iter().sum();
                        let sgy: f64 = (0..c).map(|j| g[s + j] * y[s + j]).sum();
                        for j in 0..c {
                            ga[s + j] += inv[r] / n * (n * g[s + j] - sg - y[s + j] * sgy);
                        }
                    }
                });
            }
        }
    }
}

/// Central-difference derivative by Ridders' extrapolation: central
/// differences at steps shrinking from `step` by a constant factor are
/// extrapolated to zero step, and the estimate with the smallest internal
/// error bound is kept. Large initial steps keep roundoff small for tiny
/// derivatives while the extrapolation removes truncation error, so no single
/// step has to suit every coordinate.
pub fn ridders_derivative<F>(mut f: F, step: f64) -> Result<f64, NumError>
where
    F: FnMut(f64) -> Result<f64, NumError>,
{
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const TABLE: usize = 16;
    let mut central = |h: f64| -> Result<f64, NumError> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let mut h = step;
    let mut prev = vec![central(h)?];
    let mut best = prev[0];
    let mut best_err = f64::INFINITY;
    for _ in 1..TABLE {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = SHRINK2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let err = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = v;
            }
            row.push(v);
        }
        prev = row;
    }
    Ok(best)
}

/// Max over coordinates of `|analytic − numeric| / (|analytic| + 1e-8)` for a
/// scalar function `f` of a single tensor argument, where the numeric
/// derivative is [`ridders_derivative`] starting from `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get_or_zeros(x);

    let eval = |p: &Tensor| -> Result<f64, NumError> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let y = f(&mut t, x)?;
        Ok(t.item(y))
    };
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.data.len() {
        let orig = probe.data[i];
        let numeric = ridders_derivative(
            |d| {
                probe.data[i] = orig + d;
                eval(&probe)
            },
            step,
        )?;
        probe.data[i] = orig;
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
