//! Dense row-major `f64` matrices and the handful of differentiable
//! primitives the network needs.
//!
//! Every public operation that produces a matrix checks that the result is
//! finite and reports a [`Error::NonFinite`] otherwise, so numerical blow-ups
//! surface at the operation that caused them instead of propagating silently.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("matrix shape must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("Matrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw entries. Callers are responsible for keeping
    /// them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    fn checked(self, op: &str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
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

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.checked("matmul")
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_nt", self.shape(), other.shape()));
        }
        let (n, m, k) = (self.rows, other.rows, self.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * m + j] = acc;
            }
        }
        out.checked("matmul_nt")
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("matmul_tn", self.shape(), other.shape()));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for k in 0..self.rows {
            let a_row = &self.data[k * n..(k + 1) * n];
            let b_row = &other.data[k * m..(k + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.checked("matmul_tn")
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }.checked(op)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        let data = self.data.iter().map(|&v| v * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }.checked("scale")
    }

    /// In-place `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim("add_scaled", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        self.ensure_finite("add_scaled")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("hstack", self.shape(), other.shape()));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("vstack", self.shape(), other.shape()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() {
            return Err(Error::Config("empty row selection".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::Index(format!("row {i} of {}", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix { rows: idx.len(), cols: self.cols, data })
    }

    pub fn relu(&self) -> Matrix {
        let data = self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Passes `upstream` where `self > 0` and zero elsewhere; `self` is the
    /// ReLU input.
    pub fn relu_backward(&self, upstream: &Matrix) -> Result<Matrix> {
        self.zip_with(upstream, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.to_nalgebra().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Thin SVD `self = U · diag(s) · Vᵀ`, or `None` when the iteration fails
    /// to converge.
    pub fn svd(&self) -> Option<Svd> {
        let svd = nalgebra::linalg::SVD::try_new(self.to_nalgebra(), true, true, f64::EPSILON, 10_000)?;
        let u = from_nalgebra(svd.u.as_ref()?);
        let v_t = from_nalgebra(svd.v_t.as_ref()?);
        let s = svd.singular_values.iter().copied().collect();
        Some(Svd { u, s, v_t })
    }

    fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.data[i * m.ncols() + j] = m[(i, j)];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v_t: Matrix,
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), (labels.len(), 1)));
    }
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Index(format!("label {y} with {k} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        total += (max - row[y]) + sum_exp.ln();
        let g = &mut grad.data[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - max).exp() / sum_exp;
            *gj = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".into()));
    }
    Ok((loss, grad.checked("softmax_cross_entropy")?))
}

/// Identifies one trainable matrix of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Weight(usize),
    LoraA(usize),
    LoraB(usize),
}

pub type ParamSet = BTreeMap<ParamId, Matrix>;

/// A forward value together with the adjoints of every parameter.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Matrix,
    pub adjoints: ParamSet,
}

impl GradPair {
    pub fn scalar(value: f64, adjoints: ParamSet) -> Result<Self> {
        Ok(GradPair { value: Matrix::new(1, 1, vec![value])?, adjoints })
    }

    /// Adjoint of `id`, or zeros shaped like `like` when the parameter is not
    /// on the forward path.
    pub fn adjoint_or_zero(&self, id: ParamId, like: &Matrix) -> Matrix {
        self.adjoints
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

/// Compares analytic adjoints from `f` against central differences on every
/// coordinate of every parameter, returning the largest relative error
/// `|analytic − numeric| / max(1e−8, |analytic| + |numeric|)`.
///
/// `f` must return a 1×1 value (the scalar objective).
pub fn finite_difference_check<F>(mut f: F, params: &ParamSet, h: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<GradPair>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let scalar = |g: &GradPair| -> Result<f64> {
        if g.value.shape() != (1, 1) {
            return Err(Error::dim("finite_difference_check", g.value.shape(), (1, 1)));
        }
        let v = g.value.get(0, 0);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite_difference_check objective".into()))
        }
    };
    let analytic = f(params)?;
    scalar(&analytic)?;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (&id, base) in params {
        let adj = analytic.adjoint_or_zero(id, base);
        if adj.shape() != base.shape() {
            return Err(Error::dim("finite_difference_check adjoint", adj.shape(), base.shape()));
        }
        for i in 0..base.len() {
            let orig = base.data[i];
            probe.get_mut(&id).expect("probe mirrors params").data[i] = orig + h;
            let plus = scalar(&f(&probe)?)?;
            probe.get_mut(&id).expect("probe mirrors params").data[i] = orig - h;
            let minus = scalar(&f(&probe)?)?;
            probe.get_mut(&id).expect("probe mirrors params").data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = adj.data[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
