//! Dense row-major `f64` matrices and a tape-based reverse-mode autograd.
//!
//! Every model in the crate is small enough that a 2-D matrix is the only
//! tensor shape needed. A [`Graph`] records operations on [`Var`] handles as
//! they are executed; [`Graph::backward`] walks the tape in reverse and
//! returns a gradient for every node. Parameters enter a graph through
//! [`Graph::param`], which remembers the [`ParamStore`] slot so gradients can
//! be routed back to it.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch {:?} x {:?}", self.shape(), other.shape());
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Matrix { rows, cols, data }
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Looks up a parameter that the caller registered itself.
    pub fn expect_id(&self, name: &str) -> ParamId {
        self.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values.
    pub fn fingerprint(&self) -> String {
        self.fingerprint_filtered(|_| true)
    }

    pub fn fingerprint_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (_, name, m) in self.iter().filter(|(_, n, _)| keep(n)) {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    PickPerRow(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant or input leaf.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter leaf; repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_cache.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_cache.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Var {
        self.param(store, store.expect_id(name))
    }

    /// Copies the value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.input(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.cols, "matmul_t shape mismatch");
        let mut out = Matrix::zeros(am.rows, bm.rows);
        for i in 0..am.rows {
            let ar = am.row(i);
            for j in 0..bm.rows {
                out.data[i * bm.rows + j] = ar.iter().zip(bm.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows, 1, "add_row expects a single row");
        assert_eq!(am.cols, rm.cols, "add_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&rm.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows, 1, "mul_row expects a single row");
        assert_eq!(am.cols, rm.cols, "mul_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&rm.data) {
                *x *= b;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds a constant matrix (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        self.push(v, Op::AddConst(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        self.push(v, Op::Minimum(a, b))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::vstack(&mats);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.push(v, Op::SliceRows(a, start))
    }

    /// Column vector with `a[i, idx[i]]` in row `i`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, idx.len(), "pick_per_row length mismatch");
        let data = idx.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect();
        self.push(Matrix::from_vec(idx.len(), 1, data), Op::PickPerRow(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// 1×c row holding the mean of each column.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(1, m.cols);
        for r in 0..m.rows {
            for (o, x) in v.data.iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        let n = m.rows.max(1) as f64;
        v.scale_assign(1.0 / n);
        self.push(v, Op::MeanRows(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[idx] {
                    params.insert(id, g.clone());
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul(&bm.transpose()));
                accumulate(grads, *b, am.transpose().matmul(g));
            }
            Op::MatMulT(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul(bm));
                accumulate(grads, *b, g.transpose().matmul(am));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bm, |x, y| x * y));
                accumulate(grads, *b, g.zip_map(am, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let (am, rm) = (self.value(*a), self.value(*row));
                let mut ga = g.clone();
                for r in 0..ga.rows {
                    for (x, s) in ga.row_mut(r).iter_mut().zip(&rm.data) {
                        *x *= s;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *row, column_sums(&g.zip_map(am, |x, y| x * y)));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, gy) = (out.row(r), g.row(r));
                    let total: f64 = gy.iter().sum();
                    for ((o, ly), q) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = q - ly.exp() * total;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let mut ga = Matrix::zeros(out.rows, out.cols);
                let n = out.cols as f64;
                for r in 0..out.rows {
                    let (y, gy) = (out.row(r), g.row(r));
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((o, yy), gg) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = inv_std[r] * (gg - mean_g - yy * mean_gy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let am = self.value(*a);
                accumulate(grads, *a, g.zip_map(am, |q, x| q * gelu_grad(x)));
            }
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |q, y| q * (1.0 - y * y))),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |q, y| q * y)),
            Op::Abs(a) => {
                let am = self.value(*a);
                accumulate(grads, *a, g.zip_map(am, |q, x| q * x.signum() * f64::from(x != 0.0)));
            }
            Op::Clamp(a, lo, hi) => {
                let am = self.value(*a);
                accumulate(grads, *a, g.zip_map(am, |q, x| if x < *lo || x > *hi { 0.0 } else { q }));
            }
            Op::Minimum(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let mask = am.zip_map(bm, |x, y| f64::from(x <= y));
                accumulate(grads, *a, g.zip_map(&mask, |q, m| q * m));
                accumulate(grads, *b, g.zip_map(&mask, |q, m| q * (1.0 - m)));
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows, t.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows;
                    accumulate(grads, *p, g.slice_rows(start, start + rows));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    let mut gp = Matrix::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, *p, gp);
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows, am.cols);
                ga.data[start * am.cols..(start + out.rows) * am.cols].copy_from_slice(&g.data);
                accumulate(grads, *a, ga);
            }
            Op::PickPerRow(a, idx) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows, am.cols);
                for (r, &c) in idx.iter().enumerate() {
                    ga.set(r, c, g.data[r]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let am = self.value(*a);
                accumulate(grads, *a, Matrix::filled(am.rows, am.cols, g.data[0]));
            }
            Op::MeanRows(a) => {
                let am = self.value(*a);
                let n = am.rows.max(1) as f64;
                let mut ga = Matrix::zeros(am.rows, am.cols);
                for r in 0..am.rows {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                        *o = x / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, x) in out.data.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> HashMap<ParamId, Matrix> {
        self.params
    }
}

/// Sum of parameter gradients over several backward passes.
#[derive(Debug, Default, Clone)]
pub struct GradAccumulator {
    grads: HashMap<ParamId, Matrix>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: Gradients) {
        for (id, g) in grads.into_params() {
            match self.grads.get_mut(&id) {
                Some(e) => e.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.values_mut().for_each(|g| g.scale_assign(s));
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Matrix::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|g| g.data.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

pub mod fd {
    //! Central finite differences for gradient checks.
    use super::*;

    /// Largest relative error between analytic and central-difference
    /// gradients over every scalar of every listed parameter.
    pub fn max_param_rel_error(
        store: &mut ParamStore,
        ids: &[ParamId],
        h: f64,
        loss: impl Fn(&ParamStore) -> f64,
        analytic: &HashMap<ParamId, Matrix>,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for &id in ids {
            let n = store.get(id).data.len();
            for i in 0..n {
                let orig = store.get(id).data[i];
                store.get_mut(id).data[i] = orig + h;
                let up = loss(store);
                store.get_mut(id).data[i] = orig - h;
                let down = loss(store);
                store.get_mut(id).data[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.get(&id).map_or(0.0, |g| g.data[i]);
                worst = worst.max(rel_error(a, numeric));
            }
        }
        worst
    }

    /// Relative error with an absolute floor so that near-zero gradients
    /// compare on an absolute scale.
    pub fn rel_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }
}
