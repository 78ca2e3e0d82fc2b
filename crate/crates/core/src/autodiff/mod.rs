//! Minimal dense-tensor reverse-mode automatic differentiation: enough
//! elementwise ops, matrix products, reductions, softmax/layernorm, and shape
//! plumbing to train the toy decoder. 64-bit floats throughout; every op's
//! backward rule is checked against central finite differences in tests.
//!
//! A `Tape` owns the node arena; `Tensor` is a cheap handle. Ops append nodes,
//! so node index order is already topological and `backward` walks it in
//! reverse. One tape serves one forward/backward pass; training builds a fresh
//! tape per step.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod check;
pub mod optim;
pub mod params;

#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    MinElem { a: usize, b: usize },
    MaxElem { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Neg { a: usize },
    Abs { a: usize },
    Ln { a: usize },
    Powf { a: usize, k: f64 },
    Sigmoid { a: usize },
    Relu { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatmulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    ConcatCols { a: usize, b: usize, rows: usize, ca: usize, cb: usize },
    SliceCols { a: usize, rows: usize, cols: usize, start: usize, end: usize },
    GatherRows { a: usize, cols: usize, idx: Vec<usize> },
    RepeatInterleaveRows { a: usize, rows: usize, cols: usize, times: usize },
    TileRows { a: usize, rows: usize, cols: usize, times: usize },
    ScaleRows { a: usize, s: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    MaxLastDim { a: usize, cols: usize, argmax: Vec<usize> },
    SoftmaxLast { a: usize, rows: usize, cols: usize },
    LayerNormLast { a: usize, rows: usize, cols: usize, inv_std: Vec<f64> },
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Tensor {
    tape: Rc<RefCell<TapeInner>>,
    idx: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.idx];
        f.debug_struct("Tensor").field("shape", &node.shape).field("value", &node.value).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense matrix product c[m×n] = a[m×k]·b[k×n], ikj loop order.
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// c[m×n] = a[m×k]·b[n×k]ᵀ (row-by-row dot products).
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// c[k×n] = a[m×k]ᵀ·b[m×n] (sum over rows of both).
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// When shapes differ, the second operand must be a trailing suffix of the
/// first and is broadcast across the leading groups. Returns (groups,
/// group_len), with groups == 1 for identical shapes.
fn broadcast_layout(op: &str, a: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        let bn = numel(b);
        Ok((numel(a) / bn, bn))
    } else {
        Err(Error::shape(op, format!("shapes {a:?} and {b:?} (second must be a trailing suffix)")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor {
        let n = value.len();
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { shape, value, grad: vec![0.0; n], op });
        Tensor { tape: Rc::clone(&self.inner), idx: inner.nodes.len() - 1 }
    }

    /// New leaf node (parameter or constant input).
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape("leaf", format!("shape {shape:?} expects {} values, got {}", numel(shape), data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![], vec![v], Op::Leaf)
    }
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.idx].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.borrow().nodes[self.idx].value.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.tape.borrow().nodes[self.idx].grad.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.borrow().nodes[self.idx].value.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.idx];
        debug_assert_eq!(node.value.len(), 1, "item() on non-scalar");
        node.value[0]
    }

    fn same_tape(&self, other: &Tensor, op: &str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape, &other.tape) {
            return Err(Error::InvalidInput(format!("{op}: operands live on different tapes")));
        }
        Ok(())
    }

    fn tape_handle(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.same_tape(other, name)?;
        let (shape, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            let (groups, blen) = broadcast_layout(name, &a.shape, &b.shape)?;
            let mut out = Vec::with_capacity(a.value.len());
            for g in 0..groups {
                for t in 0..blen {
                    out.push(f(a.value[g * blen + t], b.value[t]));
                }
            }
            (a.shape.clone(), out)
        };
        Ok(self.tape_handle().push(shape, value, op(self.idx, other.idx)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "div", |a, b| a / b, |a, b| Op::Div { a, b })
    }

    /// Elementwise minimum; gradient follows the winning side (first on ties).
    pub fn min_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "min_elem", f64::min, |a, b| Op::MinElem { a, b })
    }

    /// Elementwise maximum; gradient follows the winning side (first on ties).
    pub fn max_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "max_elem", f64::max, |a, b| Op::MaxElem { a, b })
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let (shape, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            (a.shape.clone(), a.value.iter().map(|v| f(*v)).collect())
        };
        self.tape_handle().push(shape, value, op)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|v| v + c, Op::AddScalar { a: self.idx })
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(|v| v * c, Op::MulScalar { a: self.idx, c })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|v| -v, Op::Neg { a: self.idx })
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, Op::Abs { a: self.idx })
    }

    /// Natural log; callers clamp inputs positive first.
    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, Op::Ln { a: self.idx })
    }

    /// x^k for positive x (callers clamp first when k is fractional).
    pub fn powf(&self, k: f64) -> Tensor {
        self.unary(|v| v.powf(k), Op::Powf { a: self.idx, k })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { a: self.idx })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), Op::Relu { a: self.idx })
    }

    /// Clamp to [lo, hi]; gradient passes through inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|v| v.clamp(lo, hi), Op::Clamp { a: self.idx, lo, hi })
    }

    /// a[m×k] · b[k×n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "matmul")?;
        let (m, k, n, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (m, k, n, mm_nn(&a.value, &b.value, m, k, n))
        };
        Ok(self.tape_handle().push(vec![m, n], value, Op::Matmul { a: self.idx, b: other.idx, m, k, n }))
    }

    /// a[m×k] · b[n×k]ᵀ.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "matmul_nt")?;
        let (m, k, n, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            (m, k, n, mm_nt(&a.value, &b.value, m, k, n))
        };
        Ok(self.tape_handle().push(vec![m, n], value, Op::MatmulNT { a: self.idx, b: other.idx, m, k, n }))
    }

    /// Concatenate two 2-D tensors along columns.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "concat_cols")?;
        let (rows, ca, cb, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
                return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let (rows, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                out.extend_from_slice(&a.value[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&b.value[r * cb..(r + 1) * cb]);
            }
            (rows, ca, cb, out)
        };
        Ok(self
            .tape_handle()
            .push(vec![rows, ca + cb], value, Op::ConcatCols { a: self.idx, b: other.idx, rows, ca, cb }))
    }

    /// Columns [start, end) of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if a.shape.len() != 2 || end > a.shape[1] || start >= end {
                return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {:?}", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                out.extend_from_slice(&a.value[r * cols + start..r * cols + end]);
            }
            (rows, cols, out)
        };
        Ok(self
            .tape_handle()
            .push(vec![rows, end - start], value, Op::SliceCols { a: self.idx, rows, cols, start, end }))
    }

    /// Rows of a 2-D tensor selected by index, repeats allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (cols, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(Error::shape("gather_rows", format!("{:?} is not 2-D", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if let Some(bad) = idx.iter().find(|i| **i >= rows) {
                return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
            }
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                out.extend_from_slice(&a.value[r * cols..(r + 1) * cols]);
            }
            (cols, out)
        };
        Ok(self
            .tape_handle()
            .push(vec![idx.len(), cols], value, Op::GatherRows { a: self.idx, cols, idx: idx.to_vec() }))
    }

    /// Each row repeated `times` consecutively: [r0, r0, …, r1, r1, …].
    pub fn repeat_interleave_rows(&self, times: usize) -> Result<Tensor> {
        let (rows, cols, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(Error::shape("repeat_interleave_rows", format!("{:?} is not 2-D", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * times * cols);
            for r in 0..rows {
                for _ in 0..times {
                    out.extend_from_slice(&a.value[r * cols..(r + 1) * cols]);
                }
            }
            (rows, cols, out)
        };
        Ok(self.tape_handle().push(
            vec![rows * times, cols],
            value,
            Op::RepeatInterleaveRows { a: self.idx, rows, cols, times },
        ))
    }

    /// The whole row block repeated `times`: [r0, …, rN, r0, …, rN, …].
    pub fn tile_rows(&self, times: usize) -> Result<Tensor> {
        let (rows, cols, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(Error::shape("tile_rows", format!("{:?} is not 2-D", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * times * cols);
            for _ in 0..times {
                out.extend_from_slice(&a.value);
            }
            (rows, cols, out)
        };
        Ok(self
            .tape_handle()
            .push(vec![rows * times, cols], value, Op::TileRows { a: self.idx, rows, cols, times }))
    }

    /// Multiply each row of a 2-D tensor by the matching entry of a length-R
    /// vector.
    pub fn scale_rows(&self, scales: &Tensor) -> Result<Tensor> {
        self.same_tape(scales, "scale_rows")?;
        let (rows, cols, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            let s = &inner.nodes[scales.idx];
            if a.shape.len() != 2 || s.value.len() != a.shape[0] {
                return Err(Error::shape(
                    "scale_rows",
                    format!("{:?} scaled by vector of {}", a.shape, s.value.len()),
                ));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let sv = s.value[r];
                for c in 0..cols {
                    out.push(a.value[r * cols + c] * sv);
                }
            }
            (rows, cols, out)
        };
        Ok(self
            .tape_handle()
            .push(vec![rows, cols], value, Op::ScaleRows { a: self.idx, s: scales.idx, rows, cols }))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let value = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if numel(shape) != a.value.len() {
                return Err(Error::shape("reshape", format!("{:?} to {shape:?}", a.shape)));
            }
            a.value.clone()
        };
        Ok(self.tape_handle().push(shape.to_vec(), value, Op::Reshape { a: self.idx }))
    }

    pub fn sum(&self) -> Tensor {
        let v = self.tape.borrow().nodes[self.idx].value.iter().sum();
        self.tape_handle().push(vec![], vec![v], Op::Sum { a: self.idx })
    }

    pub fn mean(&self) -> Tensor {
        let inner_len = self.numel();
        let v = self.tape.borrow().nodes[self.idx].value.iter().sum::<f64>() / inner_len as f64;
        self.tape_handle().push(vec![], vec![v], Op::Mean { a: self.idx })
    }

    /// Row-wise maximum of a 2-D tensor; subgradient flows to the first
    /// argmax of each row.
    pub fn max_last_dim(&self) -> Result<Tensor> {
        let (rows, cols, value, argmax) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if a.shape.len() != 2 || a.shape[1] == 0 {
                return Err(Error::shape("max_last_dim", format!("{:?} is not 2-D", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut value = Vec::with_capacity(rows);
            let mut argmax = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &a.value[r * cols..(r + 1) * cols];
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                value.push(row[best]);
                argmax.push(best);
            }
            (rows, cols, value, argmax)
        };
        Ok(self.tape_handle().push(vec![rows], value, Op::MaxLastDim { a: self.idx, cols, argmax }))
    }

    /// Numerically stable row softmax of a 2-D tensor.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let (rows, cols, value) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if a.shape.len() != 2 || a.shape[1] == 0 {
                return Err(Error::shape("softmax_last", format!("{:?} is not 2-D", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let row = &a.value[r * cols..(r + 1) * cols];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / s));
            }
            (rows, cols, out)
        };
        Ok(self.tape_handle().push(vec![rows, cols], value, Op::SoftmaxLast { a: self.idx, rows, cols }))
    }

    /// Row normalization of a 2-D tensor to zero mean and unit variance (no
    /// affine parameters; compose with mul/add for those).
    pub fn layernorm_last(&self) -> Result<Tensor> {
        const EPS: f64 = 1e-9;
        let (rows, cols, value, inv_std) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx];
            if a.shape.len() != 2 || a.shape[1] == 0 {
                return Err(Error::shape("layernorm_last", format!("{:?} is not 2-D", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut out = Vec::with_capacity(rows * cols);
            let mut inv_std = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &a.value[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std.push(is);
                out.extend(row.iter().map(|v| (v - mean) * is));
            }
            (rows, cols, out, inv_std)
        };
        Ok(self
            .tape_handle()
            .push(vec![rows, cols], value, Op::LayerNormLast { a: self.idx, rows, cols, inv_std }))
    }

    /// Seed the gradient of this scalar and propagate through the tape.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.borrow_mut();
        if inner.nodes[self.idx].value.len() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}, expected scalar", inner.nodes[self.idx].shape)));
        }
        inner.nodes[self.idx].grad[0] += 1.0;
        for idx in (0..=self.idx).rev() {
            inner.backward_node(idx);
        }
        Ok(())
    }
}

impl TapeInner {
    fn backward_node(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        if matches!(op, Op::Leaf) {
            return;
        }
        let g = self.nodes[idx].grad.clone();
        if g.iter().all(|v| *v == 0.0) {
            return;
        }
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, &g, |_, gi| gi);
                self.accumulate(b, &g, |_, gi| gi);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, &g, |_, gi| gi);
                self.accumulate(b, &g, |_, gi| -gi);
            }
            Op::Mul { a, b } => {
                let (bv, layout) = self.broadcast_of(a, b);
                self.accumulate_idx(a, &g, |i, gi| gi * bv[i % layout.1]);
                let av = self.nodes[a].value.clone();
                self.accumulate_idx_small(b, &g, layout, |t, gi, gidx| gi * av[gidx * layout.1 + t]);
            }
            Op::Div { a, b } => {
                let (bv, layout) = self.broadcast_of(a, b);
                self.accumulate_idx(a, &g, |i, gi| gi / bv[i % layout.1]);
                let av = self.nodes[a].value.clone();
                self.accumulate_idx_small(b, &g, layout, |t, gi, gidx| {
                    let bb = bv[t];
                    -gi * av[gidx * layout.1 + t] / (bb * bb)
                });
            }
            Op::MinElem { a, b } | Op::MaxElem { a, b } => {
                let is_min = matches!(self.nodes[idx].op, Op::MinElem { .. });
                let (bv, layout) = self.broadcast_of(a, b);
                let av = self.nodes[a].value.clone();
                let wins_a = |i: usize| {
                    let x = av[i];
                    let y = bv[i % layout.1];
                    if is_min {
                        x <= y
                    } else {
                        x >= y
                    }
                };
                self.accumulate_idx(a, &g, |i, gi| if wins_a(i) { gi } else { 0.0 });
                self.accumulate_idx_small(b, &g, layout, |t, gi, gidx| {
                    if wins_a(gidx * layout.1 + t) {
                        0.0
                    } else {
                        gi
                    }
                });
            }
            Op::AddScalar { a } => self.accumulate(a, &g, |_, gi| gi),
            Op::MulScalar { a, c } => self.accumulate(a, &g, |_, gi| gi * c),
            Op::Neg { a } => self.accumulate(a, &g, |_, gi| -gi),
            Op::Abs { a } => {
                let av = self.nodes[a].value.clone();
                self.accumulate_idx(a, &g, |i, gi| {
                    if av[i] > 0.0 {
                        gi
                    } else if av[i] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Ln { a } => {
                let av = self.nodes[a].value.clone();
                self.accumulate_idx(a, &g, |i, gi| gi / av[i]);
            }
            Op::Powf { a, k } => {
                let av = self.nodes[a].value.clone();
                self.accumulate_idx(a, &g, |i, gi| gi * k * av[i].powf(k - 1.0));
            }
            Op::Sigmoid { a } => {
                let y = self.nodes[idx].value.clone();
                self.accumulate_idx(a, &g, |i, gi| gi * y[i] * (1.0 - y[i]));
            }
            Op::Relu { a } => {
                let av = self.nodes[a].value.clone();
                self.accumulate_idx(a, &g, |i, gi| if av[i] > 0.0 { gi } else { 0.0 });
            }
            Op::Clamp { a, lo, hi } => {
                let av = self.nodes[a].value.clone();
                self.accumulate_idx(a, &g, |i, gi| if av[i] >= lo && av[i] <= hi { gi } else { 0.0 });
            }
            Op::Matmul { a, b, m, k, n } => {
                let da = mm_nt(&g, &self.nodes[b].value, m, n, k);
                self.accumulate_vec(a, &da);
                let db = mm_tn(&self.nodes[a].value, &g, m, k, n);
                self.accumulate_vec(b, &db);
            }
            Op::MatmulNT { a, b, m, k, n } => {
                let da = mm_nn(&g, &self.nodes[b].value, m, n, k);
                self.accumulate_vec(a, &da);
                let db = mm_tn(&g, &self.nodes[a].value, m, n, k);
                self.accumulate_vec(b, &db);
            }
            Op::ConcatCols { a, b, rows, ca, cb } => {
                let cols = ca + cb;
                let mut da = vec![0.0; rows * ca];
                let mut db = vec![0.0; rows * cb];
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * cols..r * cols + ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&g[r * cols + ca..(r + 1) * cols]);
                }
                self.accumulate_vec(a, &da);
                self.accumulate_vec(b, &db);
            }
            Op::SliceCols { a, rows, cols, start, end } => {
                let width = end - start;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + end].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.accumulate_vec(a, &da);
            }
            Op::GatherRows { a, cols, idx: rows_idx } => {
                let mut da = vec![0.0; self.nodes[a].value.len()];
                for (out_r, &src_r) in rows_idx.iter().enumerate() {
                    for c in 0..cols {
                        da[src_r * cols + c] += g[out_r * cols + c];
                    }
                }
                self.accumulate_vec(a, &da);
            }
            Op::RepeatInterleaveRows { a, rows, cols, times } => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for t in 0..times {
                        let src = (r * times + t) * cols;
                        for c in 0..cols {
                            da[r * cols + c] += g[src + c];
                        }
                    }
                }
                self.accumulate_vec(a, &da);
            }
            Op::TileRows { a, rows, cols, times } => {
                let mut da = vec![0.0; rows * cols];
                for t in 0..times {
                    let base = t * rows * cols;
                    for i in 0..rows * cols {
                        da[i] += g[base + i];
                    }
                }
                self.accumulate_vec(a, &da);
            }
            Op::ScaleRows { a, s, rows, cols } => {
                let sv = self.nodes[s].value.clone();
                self.accumulate_idx(a, &g, |i, gi| gi * sv[i / cols]);
                let av = self.nodes[a].value.clone();
                let mut ds = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        ds[r] += g[r * cols + c] * av[r * cols + c];
                    }
                }
                self.accumulate_vec(s, &ds);
            }
            Op::Reshape { a } => self.accumulate(a, &g, |_, gi| gi),
            Op::Sum { a } => {
                let gi = g[0];
                let len = self.nodes[a].value.len();
                self.accumulate_vec(a, &vec![gi; len]);
            }
            Op::Mean { a } => {
                let len = self.nodes[a].value.len();
                let gi = g[0] / len as f64;
                self.accumulate_vec(a, &vec![gi; len]);
            }
            Op::MaxLastDim { a, cols, argmax } => {
                let mut da = vec![0.0; self.nodes[a].value.len()];
                for (r, &c) in argmax.iter().enumerate() {
                    da[r * cols + c] += g[r];
                }
                self.accumulate_vec(a, &da);
            }
            Op::SoftmaxLast { a, rows, cols } => {
                let y = self.nodes[idx].value.clone();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate_vec(a, &da);
            }
            Op::LayerNormLast { a, rows, cols, inv_std } => {
                let y = self.nodes[idx].value.clone();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean_g: f64 = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gy: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        da[r * cols + c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.accumulate_vec(a, &da);
            }
        }
    }

    /// Shared layout math for ops whose second operand may be broadcast.
    fn broadcast_of(&self, a: usize, b: usize) -> (Vec<f64>, (usize, usize)) {
        let bn = self.nodes[b].value.len();
        let an = self.nodes[a].value.len();
        (self.nodes[b].value.clone(), (an / bn, bn))
    }

    fn accumulate(&mut self, target: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        let grad = &mut self.nodes[target].grad;
        if grad.len() == g.len() {
            for (i, gv) in g.iter().enumerate() {
                grad[i] += f(i, *gv);
            }
        } else {
            // Broadcast case: fold leading groups onto the smaller operand.
            let bn = grad.len();
            for (i, gv) in g.iter().enumerate() {
                grad[i % bn] += f(i, *gv);
            }
        }
    }

    fn accumulate_idx(&mut self, target: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        let contrib: Vec<f64> = g.iter().enumerate().map(|(i, gv)| f(i, *gv)).collect();
        self.accumulate_vec(target, &contrib);
    }

    /// Accumulate into the (possibly broadcast) second operand: the closure
    /// receives (position within operand, incoming grad, group index).
    fn accumulate_idx_small(
        &mut self,
        target: usize,
        g: &[f64],
        layout: (usize, usize),
        f: impl Fn(usize, f64, usize) -> f64,
    ) {
        let (_, blen) = layout;
        let grad = &mut self.nodes[target].grad;
        for (i, gv) in g.iter().enumerate() {
            grad[i % blen] += f(i % blen, *gv, i / blen);
        }
    }

    fn accumulate_vec(&mut self, target: usize, contrib: &[f64]) {
        let grad = &mut self.nodes[target].grad;
        debug_assert_eq!(grad.len(), contrib.len());
        for (gslot, c) in grad.iter_mut().zip(contrib) {
            *gslot += c;
        }
    }
}
