//! Dense row-major `f64` matrices and the SPD kernels the pruner is built on.
//!
//! Everything here is a pure function of its inputs. Summation order is fixed
//! so results are bit-identical across runs and thread counts.

use std::fmt;

use crate::error::{Error, Result};

/// Relative tolerance used by [`cholesky`] when checking symmetry.
pub const SYMMETRY_RTOL: f64 = 1e-9;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite entry at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from nested rows; panics on ragged input. Intended for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data).expect("finite literal")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Square submatrix over the given (sorted or not) index set.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), idx.len(), |i, j| self.get(idx[i], idx[j]))
    }

    /// Stacks rows of `other` under `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "vstack needs equal column counts, got {} and {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Lower-triangular factor `L` with `L·Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn into_lower(self) -> Matrix {
        self.l
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        Matrix::from_fn(n, n, |i, j| {
            let mut acc = 0.0;
            for k in 0..=i.min(j) {
                acc += self.l.get(i, k) * self.l.get(j, k);
            }
            acc
        })
    }

    /// Solves `A·x = b` in place for a single right-hand side.
    pub fn solve_vec(&self, b: &mut [f64]) {
        let n = self.dim();
        let l = &self.l;
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= l.get(i, k) * b[k];
            }
            b[i] = acc / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for k in i + 1..n {
                acc -= l.get(k, i) * b[k];
            }
            b[i] = acc / l.get(i, i);
        }
    }
}

/// Standard matrix product. Each output element accumulates over the inner
/// index strictly left to right.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let tol = SYMMETRY_RTOL * a.max_abs();
    for i in 0..a.rows {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > tol {
                return Err(Error::NotSymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Unpivoted Cholesky factorization. Reads the lower triangle.
pub fn cholesky(a: &Matrix) -> Result<CholeskyFactor> {
    check_symmetric(a)?;
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(CholeskyFactor { l })
}

/// Inverse of an SPD matrix from Cholesky solves against identity columns.
/// The result is symmetrized by mirroring the lower triangle.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let f = cholesky(a)?;
    let n = f.dim();
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        f.solve_vec(&mut col);
        for i in j..n {
            inv.set(i, j, col[i]);
            inv.set(j, i, col[i]);
        }
    }
    Ok(inv)
}

/// Solves `a·x = rhs` column by column.
pub fn solve_spd(a: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if a.rows != rhs.rows {
        return Err(Error::Shape(format!(
            "system is {}x{} but right-hand side has {} rows",
            a.rows, a.cols, rhs.rows
        )));
    }
    let f = cholesky(a)?;
    let mut x = Matrix::zeros(rhs.rows, rhs.cols);
    let mut col = vec![0.0; rhs.rows];
    for j in 0..rhs.cols {
        for i in 0..rhs.rows {
            col[i] = rhs.get(i, j);
        }
        f.solve_vec(&mut col);
        for i in 0..rhs.rows {
            x.set(i, j, col[i]);
        }
    }
    Ok(x)
}
