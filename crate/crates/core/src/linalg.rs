//! Dense row-major matrix and vector kernels.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("matrix is rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },
    #[error("{op}: non-finite entry")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_dim(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch {
            op,
            expected,
            found,
        })
    }
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(pub Vec<T>);

impl<T: Real> Vector<T> {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![T::zero(); n])
    }

    pub fn dot(&self, other: &[T]) -> Result<T> {
        check_dim("dot", self.len(), other.len())?;
        Ok(dot(self, other))
    }

    pub fn norm(&self) -> T {
        dot(self, self).sqrt()
    }

    pub fn norm_inf(&self) -> T {
        norm_inf(self)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Vector(v)
    }
}

impl<T> FromIterator<T> for Vector<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm_inf<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_dim("Matrix::new", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("Matrix::from_rows", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.iter_rows().map(<[T]>::to_vec).collect()
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm_inf(&self) -> T {
        norm_inf(&self.data)
    }

    /// Frobenius norm.
    pub fn norm_fro(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        check_dim("vstack", self.cols, other.cols)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// `m · v`.
pub fn matvec<T: Real>(m: &Matrix<T>, v: &[T]) -> Result<Vector<T>> {
    check_dim("matvec", m.cols, v.len())?;
    Ok(m.iter_rows().map(|r| dot(r, v)).collect())
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_dim("matmul", a.cols, b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, the layout used to push stacked row-points through a layer.
pub fn matmul_transposed<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_dim("matmul_transposed", a.cols, b.cols)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out[(i, j)] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// Least-squares solution of `a · X ≈ b`, via Householder QR with column
/// pivoting. Fails with the numerical rank when `a` is rank deficient.
pub fn least_squares<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let (m, n) = a.shape();
    check_dim("least_squares rows", m, b.rows)?;
    if m < n {
        return Err(LinalgError::RankDeficient { rank: m, cols: n });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(LinalgError::NonFinite { op: "least_squares" });
    }
    let k = b.cols;
    let mut r = a.clone();
    let mut qtb = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut diag_max = T::zero();
    let mut rank = n;
    let tol_scale = T::of(m.max(n) as f64) * T::epsilon();

    for j in 0..n {
        // Pivot on the largest remaining column norm.
        let mut best = j;
        let mut best_norm = T::neg_infinity();
        for c in j..n {
            let s: T = (j..m).map(|i| r[(i, c)] * r[(i, c)]).sum();
            if s > best_norm {
                best_norm = s;
                best = c;
            }
        }
        if best != j {
            for i in 0..m {
                let (x, y) = (r[(i, j)], r[(i, best)]);
                r[(i, j)] = y;
                r[(i, best)] = x;
            }
            perm.swap(j, best);
        }
        let norm = best_norm.sqrt();
        if j == 0 {
            diag_max = norm;
        }
        if norm <= tol_scale * diag_max || norm == T::zero() {
            rank = j;
            break;
        }
        let alpha = if r[(j, j)] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (j..m).map(|i| r[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 > T::zero() {
            let two = T::of(2.0);
            for c in j..n {
                let s = (j..m).map(|i| v[i - j] * r[(i, c)]).sum::<T>() * two / vnorm2;
                for i in j..m {
                    r[(i, c)] -= s * v[i - j];
                }
            }
            for c in 0..k {
                let s = (j..m).map(|i| v[i - j] * qtb[(i, c)]).sum::<T>() * two / vnorm2;
                for i in j..m {
                    qtb[(i, c)] -= s * v[i - j];
                }
            }
        }
    }
    if rank < n {
        return Err(LinalgError::RankDeficient { rank, cols: n });
    }

    let mut x = Matrix::zeros(n, k);
    for c in 0..k {
        for j in (0..n).rev() {
            let mut s = qtb[(j, c)];
            for l in j + 1..n {
                s -= r[(j, l)] * x[(perm[l], c)];
            }
            x[(perm[j], c)] = s / r[(j, j)];
        }
    }
    Ok(x)
}
