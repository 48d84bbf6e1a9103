//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! A [`Tensor`] is a plain value. To differentiate, a tensor is recorded on a
//! [`Tape`] as either a parameter (a leaf that receives a gradient) or a
//! constant, and every operation on the returned [`Var`] handles appends a
//! node. Nodes are only ever appended, so append order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is restricted to scalar-with-tensor. Anything richer (bias
//! rows, per-row scales) goes through an explicit op such as
//! [`Tape::repeat_rows`] or [`Tape::repeat_cols`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Zero-dimensional tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (1 for scalars and vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (length for vectors, 1 for scalars).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: matmul_raw(&self.data, &other.data, m, k, n),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, libm::fabs(a - b)))
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScaled(Var, Var, f64),
    Concat(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    RepeatCols(Var),
    RepeatRows(Var),
    RowNormalize(Var),
    ContractChannels(Var, Var),
    MaskConst(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations.
///
/// A tape is single-owner. Independent tapes can be used for independent
/// samples and their [`Gradients`] merged with [`Gradients::accumulate`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_param(&self, v: Var) -> bool {
        let n = &self.nodes[v.0];
        matches!(n.op, Op::Leaf) && n.requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if ta.shape == tb.shape {
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if tb.numel() == 1 {
            let y = tb.data[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data[0];
            tb.map(|y| f(x, y))
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(Error::shape(name, &ta.shape, &tb.shape));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let value = self.value(a).map(|x| match kind {
            Unary::Neg => -x,
            Unary::Tanh => libm::tanh(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Abs => libm::fabs(x),
            Unary::Square => x * x,
        });
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// `y + k * x`, shapes equal.
    pub fn add_scaled(&mut self, y: Var, x: Var, k: f64) -> Result<Var> {
        let (ty, tx) = (self.value(y), self.value(x));
        if ty.shape != tx.shape {
            return Err(Error::shape("add_scaled", &ty.shape, &tx.shape));
        }
        let value = Tensor {
            shape: ty.shape.clone(),
            data: ty.data.iter().zip(&tx.data).map(|(a, b)| a + k * b).collect(),
        };
        let rg = self.rg(y) || self.rg(x);
        Ok(self.push(value, Op::AddScaled(y, x, k), rg))
    }

    /// Concatenation along the last axis. Vectors and matrices with equal
    /// leading dimensions are accepted.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.shape.len() == tb.shape.len()
            && !ta.shape.is_empty()
            && ta.shape[..ta.shape.len() - 1] == tb.shape[..tb.shape.len() - 1];
        if !ok {
            return Err(Error::shape("concat", &ta.shape, &tb.shape));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let rows = ta.numel() / ca.max(1);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data[r * cb..(r + 1) * cb]);
        }
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Concat(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("softmax_rows")?;
        if !t.is_finite() {
            return Err(Error::Numeric("softmax_rows input has non-finite entries".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = libm::exp(x - max);
                total += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().fold(0.0, |acc, x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().fold(0.0, |acc, x| acc + x) / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums each row of an m×n matrix into an m×1 column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("sum_cols")?;
        let data = (0..m)
            .map(|i| t.data[i * n..(i + 1) * n].iter().fold(0.0, |acc, x| acc + x))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, 1, data)?, Op::SumCols(a), rg))
    }

    /// Columns `start..start + width` of an m×n matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("slice_cols")?;
        if start + width > n {
            return Err(Error::shape("slice_cols", &t.shape, &[start, width]));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&t.data[i * n + start..i * n + start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, width, data)?, Op::SliceCols(a, start), rg))
    }

    /// Repeats an m×1 column into an m×n matrix.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, one) = t.dims2("repeat_cols")?;
        if one != 1 {
            return Err(Error::shape("repeat_cols", &t.shape, &[m, 1]));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(core::iter::repeat_n(t.data[i], n));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::RepeatCols(a), rg))
    }

    /// Repeats a 1×n row (or length-n vector) into an m×n matrix.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 || t.shape.is_empty() {
            return Err(Error::shape("repeat_rows", &t.shape, &[1, t.cols()]));
        }
        let n = t.cols();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&t.data);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::RepeatRows(a), rg))
    }

    /// Divides each row by its sum; rows summing to zero map to zero rows.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("row_normalize")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let s = row.iter().fold(0.0, |acc, x| acc + x);
            if s != 0.0 {
                for (o, x) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o = x / s;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::RowNormalize(a), rg))
    }

    /// Per-row contraction of a flattened d×c map with a c-vector:
    /// `out[v, i] = Σ_j p[v, i·c + j] · q[v, j]`.
    pub fn contract_channels(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        let (m, dc) = tp.dims2("contract_channels")?;
        let (m2, c) = tq.dims2("contract_channels")?;
        if m != m2 || c == 0 || dc % c != 0 {
            return Err(Error::shape("contract_channels", &tp.shape, &tq.shape));
        }
        let d = dc / c;
        let mut data = vec![0.0; m * d];
        for v in 0..m {
            let qv = &tq.data[v * c..(v + 1) * c];
            for i in 0..d {
                let pv = &tp.data[v * dc + i * c..v * dc + (i + 1) * c];
                data[v * d + i] = pv.iter().zip(qv).fold(0.0, |acc, (a, b)| acc + a * b);
            }
        }
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::matrix(m, d, data)?, Op::ContractChannels(p, q), rg))
    }

    /// Elementwise product with a fixed mask that carries no gradient.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::shape("mask", &t.shape, &[mask.len()]));
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskConst(a, mask), rg))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Returns gradients for every parameter leaf the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let mut grads = Gradients::default();
        if !self.rg(loss) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads.map.insert(
                        Var(idx),
                        Tensor {
                            shape: out.shape.clone(),
                            data: g,
                        },
                    );
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    let n = tb.shape[1];
                    if self.rg(*a) {
                        let mut da = vec![0.0; m * k];
                        for (grow, darow) in g.chunks_exact(n).zip(da.chunks_exact_mut(k)) {
                            for (dp, brow) in darow.iter_mut().zip(tb.data.chunks_exact(n)) {
                                *dp = grow.iter().zip(brow).fold(0.0, |s, (x, y)| s + x * y);
                            }
                        }
                        accumulate(&mut adj, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; k * n];
                        for (grow, arow) in g.chunks_exact(n).zip(ta.data.chunks_exact(k)) {
                            for (&aip, dbrow) in arow.iter().zip(db.chunks_exact_mut(n)) {
                                for (d, x) in dbrow.iter_mut().zip(grow) {
                                    *d += aip * x;
                                }
                            }
                        }
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let n = g.len();
                    let sa = ta.numel() == 1;
                    let sb = tb.numel() == 1;
                    if self.rg(*a) {
                        let local: Vec<f64> = match kind {
                            Binary::Add | Binary::Sub => g.clone(),
                            Binary::Mul if sb => g.iter().map(|x| x * tb.data[0]).collect(),
                            Binary::Mul => g.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
                            Binary::Div if sb => g.iter().map(|x| x / tb.data[0]).collect(),
                            Binary::Div => g.iter().zip(&tb.data).map(|(x, y)| x / y).collect(),
                        };
                        accumulate(&mut adj, *a, reduce_broadcast(local, ta.numel()));
                    }
                    if self.rg(*b) {
                        let xa = |i: usize| if sa { ta.data[0] } else { ta.data[i] };
                        let xb = |i: usize| if sb { tb.data[0] } else { tb.data[i] };
                        let local: Vec<f64> = match kind {
                            Binary::Add => g.clone(),
                            Binary::Sub => g.iter().map(|x| -x).collect(),
                            Binary::Mul if !sa => g.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                            Binary::Mul => (0..n).map(|i| g[i] * xa(i)).collect(),
                            Binary::Div => (0..n)
                                .map(|i| {
                                    let y = xb(i);
                                    -g[i] * xa(i) / (y * y)
                                })
                                .collect(),
                        };
                        accumulate(&mut adj, *b, reduce_broadcast(local, tb.numel()));
                    }
                }
                Op::Unary(kind, a) => {
                    let x = &self.value(*a).data;
                    let y = &out.data;
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            gi * match kind {
                                Unary::Neg => -1.0,
                                Unary::Tanh => 1.0 - y[i] * y[i],
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Abs => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else if x[i] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Square => 2.0 * x[i],
                            }
                        })
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut adj, *a, g.iter().map(|x| x * k).collect());
                }
                Op::AddScaled(y, x, k) => {
                    if self.rg(*x) {
                        accumulate(&mut adj, *x, g.iter().map(|v| v * k).collect());
                    }
                    if self.rg(*y) {
                        accumulate(&mut adj, *y, g);
                    }
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let rows = g.len() / (ca + cb);
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let base = r * (ca + cb);
                        da.extend_from_slice(&g[base..base + ca]);
                        db.extend_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, da);
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (out.shape[0], out.shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = g[i * n + j];
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = (out.shape[0], out.shape[1]);
                    let y = &out.data;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot = g[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .fold(0.0, |acc, (a, b)| acc + a * b);
                        for j in r {
                            da[j] = y[j] * (g[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut adj, *a, vec![g[0] / n as f64; n]);
                }
                Op::SumCols(a) => {
                    let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let mut da = Vec::with_capacity(m * n);
                    for &gi in g.iter().take(m) {
                        da.extend(core::iter::repeat_n(gi, n));
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let w = out.shape[1];
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::RepeatCols(a) => {
                    let (m, n) = (out.shape[0], out.shape[1]);
                    let da = (0..m)
                        .map(|i| g[i * n..(i + 1) * n].iter().fold(0.0, |acc, x| acc + x))
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::RepeatRows(a) => {
                    let (m, n) = (out.shape[0], out.shape[1]);
                    let mut da = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            da[j] += g[i * n + j];
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::RowNormalize(a) => {
                    let x = &self.value(*a).data;
                    let (m, n) = (out.shape[0], out.shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let s = x[r.clone()].iter().fold(0.0, |acc, v| acc + v);
                        if s == 0.0 {
                            continue;
                        }
                        let gx = g[r.clone()]
                            .iter()
                            .zip(&x[r.clone()])
                            .fold(0.0, |acc, (a, b)| acc + a * b);
                        for j in r {
                            da[j] = g[j] / s - gx / (s * s);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::ContractChannels(p, q) => {
                    let (tp, tq) = (self.value(*p), self.value(*q));
                    let (m, dc) = (tp.shape[0], tp.shape[1]);
                    let c = tq.shape[1];
                    let d = dc / c;
                    if self.rg(*p) {
                        let mut dp = vec![0.0; m * dc];
                        for v in 0..m {
                            for i in 0..d {
                                for j in 0..c {
                                    dp[v * dc + i * c + j] = g[v * d + i] * tq.data[v * c + j];
                                }
                            }
                        }
                        accumulate(&mut adj, *p, dp);
                    }
                    if self.rg(*q) {
                        let mut dq = vec![0.0; m * c];
                        for v in 0..m {
                            for i in 0..d {
                                for j in 0..c {
                                    dq[v * c + j] += g[v * d + i] * tp.data[v * dc + i * c + j];
                                }
                            }
                        }
                        accumulate(&mut adj, *q, dq);
                    }
                }
                Op::MaskConst(a, mask) => {
                    accumulate(&mut adj, *a, g.iter().zip(mask).map(|(x, m)| x * m).collect());
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn reduce_broadcast(local: Vec<f64>, target: usize) -> Vec<f64> {
    if target == local.len() {
        local
    } else {
        vec![local.iter().fold(0.0, |acc, x| acc + x)]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Gradients keyed by the parameter leaf they belong to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `other` into `self`, key by key.
    ///
    /// Only meaningful when both maps come from tapes on which the same
    /// parameters were recorded in the same order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, v) in &other.map {
            match self.map.get_mut(k) {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(&v.data) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(*k, v.clone());
                }
            }
        }
    }
}
