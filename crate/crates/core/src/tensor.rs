//! Dense row-major matrix with the handful of products and solves the rest of
//! the crate needs. 64-bit floats throughout; no broadcasting beyond what the
//! differentiation engine's closed op set requires.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("matrix needs at least one row".to_string()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single row as a 1xN matrix.
    pub fn row_matrix(row: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: row.len(),
            data: row.to_vec(),
        }
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

    /// Copies the given rows into a new matrix, in the order given.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "vstack: {} vs {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self (n x k) * other^T` where `other` is `m x k`; result `n x m`.
    /// This layout keeps both inner loops on contiguous rows.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul_nt: inner dims {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (j, d) in dst.iter_mut().enumerate() {
                let b = other.row(j);
                let mut acc = 0.0;
                for k in 0..a.len() {
                    acc += a[k] * b[k];
                }
                *d = acc;
            }
        }
        Ok(out)
    }

    /// `self (n x k) * other (k x m)`; result `n x m`.
    pub fn matmul_nn(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul_nn: inner dims {} vs {}",
                self.cols, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for (k, &aik) in a.iter().enumerate() {
                let b = other.row(k);
                let dst = out.row_mut(i);
                for j in 0..b.len() {
                    dst[j] += aik * b[j];
                }
            }
        }
        Ok(out)
    }

    /// `self^T (k x n) * other (n x m)` where `self` is `n x k`; result `k x m`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "matmul_tn: outer dims {} vs {}",
                self.rows, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for n in 0..self.rows {
            let a = self.row(n);
            let b = other.row(n);
            for (k, &ank) in a.iter().enumerate() {
                let dst = out.row_mut(k);
                for j in 0..b.len() {
                    dst[j] += ank * b[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Solves `A X = B` for square `A` by LU decomposition with partial pivoting.
/// Errors on non-square or numerically singular systems.
pub fn lu_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::shape(format!(
            "lu_solve: matrix is {}x{}, must be square",
            a.rows, a.cols
        )));
    }
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "lu_solve: system has {} rows, right-hand side has {}",
            a.rows, b.rows
        )));
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        // Partial pivoting: largest absolute value in the current column.
        let mut pivot_row = col;
        let mut pivot_abs = lu.get(col, col).abs();
        for r in col + 1..n {
            let v = lu.get(r, col).abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = r;
            }
        }
        if pivot_abs < 1e-12 {
            return Err(Error::numerical(format!(
                "lu_solve: singular pivot at column {}",
                col
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu.get(col, j);
                lu.set(col, j, lu.get(pivot_row, j));
                lu.set(pivot_row, j, tmp);
            }
            for j in 0..x.cols {
                let tmp = x.get(col, j);
                x.set(col, j, x.get(pivot_row, j));
                x.set(pivot_row, j, tmp);
            }
        }
        let pivot = lu.get(col, col);
        for r in col + 1..n {
            let factor = lu.get(r, col) / pivot;
            if factor == 0.0 {
                continue;
            }
            lu.set(r, col, 0.0);
            for j in col + 1..n {
                let v = lu.get(r, j) - factor * lu.get(col, j);
                lu.set(r, j, v);
            }
            for j in 0..x.cols {
                let v = x.get(r, j) - factor * x.get(col, j);
                x.set(r, j, v);
            }
        }
    }
    // Back substitution.
    for col in (0..n).rev() {
        let pivot = lu.get(col, col);
        for j in 0..x.cols {
            let mut acc = x.get(col, j);
            for k in col + 1..n {
                acc -= lu.get(col, k) * x.get(k, j);
            }
            x.set(col, j, acc / pivot);
        }
    }
    Ok(x)
}
