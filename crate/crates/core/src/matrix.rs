//! Dense row-major matrix of `f64`, laid out as tokens × channels.

use serde::{Deserialize, Serialize};

use crate::error::{DtqError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(DtqError::shape(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(DtqError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DtqError::NonFinite { index, value });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DtqError::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · otherᵀ`. Both operands are stored with the contraction
    /// dimension last, which is how activations ([N, C_in]) and weights
    /// ([C_out, C_in]) are laid out.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(DtqError::shape(format!(
                "matmul_t: {}x{} · ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            let dst = out.row_mut(r);
            for (o, d) in dst.iter_mut().enumerate() {
                let b = &other.data[o * other.cols..(o + 1) * other.cols];
                *d = dot(a, b);
            }
        }
        Ok(out)
    }

    /// Ordinary product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(DtqError::shape(format!(
                "matmul: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (d, &b) in out.row_mut(r).iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(DtqError::shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Per-column maximum magnitude (`max_t |X[t, c]|`).
    pub fn col_absmax(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (m, v) in out.iter_mut().zip(self.row(r)) {
                *m = m.max(v.abs());
            }
        }
        out
    }

    /// Per-row maximum magnitude.
    pub fn row_absmax(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect()
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or(DtqError::Empty("vstack"))?;
        let cols = first.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(DtqError::shape("vstack: column counts differ"));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Copies rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols);
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean squared difference of two equally shaped matrices.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(DtqError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn matmul_t_matches_matmul_of_transpose() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.0);
        let b = Matrix::from_fn(2, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let lhs = a.matmul_t(&b).unwrap();
        let rhs = a.matmul(&b.transpose()).unwrap();
        assert_eq!(lhs, rhs);
        assert_eq!(lhs.shape(), (3, 2));
    }

    #[test]
    fn absmax_reductions() {
        let m = Matrix::from_rows(&[vec![1.0, -4.0], vec![-2.0, 3.0]]).unwrap();
        assert_eq!(m.col_absmax(), vec![2.0, 4.0]);
        assert_eq!(m.row_absmax(), vec![4.0, 3.0]);
        assert_eq!(m.max_abs(), 4.0);
    }
}
