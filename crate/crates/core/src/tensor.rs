//! Dense numeric kernels.
//!
//! Storage is row-major `f32`; every reduction (dot products, softmax
//! normalizers, norms) accumulates in `f64` and rounds once on store. All
//! routines are pure and safe to call from any number of threads.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f32` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Wraps `data` as a `rows x cols` matrix, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from `f(row, col)`. Non-finite results are rejected.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
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

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    /// Copies the column block `range` into a new matrix.
    pub fn columns(&self, range: Range<usize>) -> Result<Matrix> {
        if range.start > range.end || range.end > self.cols {
            return Err(Error::Shape(format!(
                "column range {range:?} outside {} columns",
                self.cols
            )));
        }
        let width = range.len();
        let mut out = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            out.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Ok(Self::from_raw(self.rows, width, out))
    }

    /// Overwrites the columns starting at `start` with `block`.
    pub fn set_columns(&mut self, start: usize, block: &Matrix) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::Shape(format!(
                "cannot place {}x{} block at column {start} of {}x{}",
                block.rows, block.cols, self.rows, self.cols
            )));
        }
        for r in 0..self.rows {
            let dst = r * self.cols + start;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(r));
        }
        Ok(())
    }

    /// Stacks matrices along the row axis. Zero-row blocks are allowed.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = match blocks.first() {
            Some(b) => b.cols,
            None => return Ok(Matrix::zeros(0, 0)),
        };
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::Shape(format!("cannot stack {} columns onto {cols}", b.cols)));
            }
            rows += b.rows;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Matrix> {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Matrix product with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = b.cols;
    let mut out = vec![0.0f32; a.rows * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..a.rows {
        acc.fill(0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = f64::from(aik);
            for (s, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *s += aik * f64::from(bkj);
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matmul overflow".into()));
    }
    Ok(Matrix::from_raw(a.rows, n, out))
}

/// Row-wise softmax of `m / temperature`, stabilized by subtracting each
/// row's maximum before exponentiation.
pub fn softmax_rows(m: &Matrix, temperature: f32) -> Result<Matrix> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input".into()));
    }
    let inv_t = 1.0 / f64::from(temperature);
    let mut out = vec![0.0f32; m.data.len()];
    let mut buf = vec![0.0f64; m.cols];
    for r in 0..m.rows {
        let row = m.row(r);
        let mut max = f64::NEG_INFINITY;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = f64::from(v) * inv_t;
            max = max.max(*b);
        }
        let mut sum = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - max).exp();
            sum += *b;
        }
        for (o, &b) in out[r * m.cols..(r + 1) * m.cols].iter_mut().zip(&buf) {
            *o = (b / sum) as f32;
        }
    }
    Ok(Matrix::from_raw(m.rows, m.cols, out))
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of length {} against {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if !(nu > 1e-12 && nv > 1e-12) {
        return Err(Error::DegenerateVector(format!("norms {nu:e} and {nv:e}")));
    }
    if !dot.is_finite() {
        return Err(Error::Numeric("cosine similarity".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0) as f32)
}
