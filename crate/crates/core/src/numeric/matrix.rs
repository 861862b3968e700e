use std::fmt;

use crate::error::{AsiError, Result};

/// Largest block of entries printed by `Debug`; keeps diagnostics small.
const PREVIEW: usize = 8;

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AsiError::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AsiError::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AsiError::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps data produced by an internal kernel, rejecting overflow.
    pub(crate) fn from_kernel(op: &'static str, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(data.len(), rows * cols);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AsiError::NonFinite(op));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        let data = self.data.iter().map(|v| v * factor).collect();
        Self::from_kernel("Matrix::scale", self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with("Matrix::add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with("Matrix::sub", other, |a, b| a - b)
    }

    fn zip_with(&self, op: &'static str, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(op, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_kernel(op, self.rows, self.cols, data)
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AsiError::shape(op, self.shape_str(), other.shape_str()));
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{}", self.rows, self.cols)?;
        if self.rows > PREVIEW || self.cols > PREVIEW {
            write!(f, " (showing {}x{})", self.rows.min(PREVIEW), self.cols.min(PREVIEW))?;
        }
        f.write_str(" [")?;
        for r in 0..self.rows.min(PREVIEW) {
            f.write_str(if r == 0 { "[" } else { ", [" })?;
            for c in 0..self.cols.min(PREVIEW) {
                if c > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{:.6}", self.get(r, c))?;
            }
            f.write_str("]")?;
        }
        f.write_str("]")
    }
}

/// Matrix product with a fixed `k`-ascending summation order per entry.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(AsiError::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let (n, inner, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let out_row = &mut out[i * p..(i + 1) * p];
        for k in 0..inner {
            let aik = a.data[i * inner + k];
            let b_row = &b.data[k * p..(k + 1) * p];
            for (o, bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Matrix::from_kernel("matmul", n, p, out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.data.len());
    for r in 0..a.rows {
        let row = a.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= total;
        }
    }
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}
