use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{shape_err, Error, Result};

/// Dense column vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T> {
    values: Vec<T>,
}

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return shape_err("vector must have positive dimension");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("vector has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    /// Builds a vector without the finiteness scan. Callers guarantee a
    /// nonempty, finite payload.
    pub(crate) fn from_vec(values: Vec<T>) -> Self {
        debug_assert!(!values.is_empty());
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_vec(vec![T::zero(); dim])
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.values[index] = T::one();
        v
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: T) -> Self {
        Self::from_vec(self.values.iter().map(|&v| v * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::from_vec(self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_vec(self.values.iter().zip(&other.values).map(|(&a, &b)| a + b).collect())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(self.values.iter().map(|&v| f(v)).collect())
    }

    /// Index of the largest entry; the first one wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }
}

impl<T> Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl<T> IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.values[i]
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return shape_err(format!("matrix dims must be positive, got {rows}x{cols}"));
        }
        if values.len() != rows * cols {
            return shape_err(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Self { rows, cols, values: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    /// Stacks vectors of equal dimension as rows.
    pub fn from_rows(rows: &[Vector<T>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return shape_err("cannot stack zero rows");
        };
        let cols = first.dim();
        if rows.iter().any(|r| r.dim() != cols) {
            return shape_err("rows have unequal dimensions");
        }
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self { rows: rows.len(), cols, values })
    }

    /// `u vᵀ`
    pub fn outer(u: &[T], v: &[T]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.values[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return shape_err(format!("cannot multiply {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vector<T>> {
        if x.len() != self.cols {
            return shape_err(format!("cannot apply {}x{} matrix to vector of dim {}", self.rows, self.cols, x.len()));
        }
        Ok(Vector::from_vec((0..self.rows).map(|i| dot(self.row(i), x)).collect()))
    }

    /// `selfᵀ x`
    pub fn tr_matvec(&self, x: &[T]) -> Result<Vector<T>> {
        if x.len() != self.rows {
            return shape_err(format!(
                "cannot apply transpose of {}x{} matrix to vector of dim {}",
                self.rows,
                self.cols,
                x.len()
            ));
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(Vector::from_vec(out))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, values })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, values })
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, values: self.values.iter().map(|&v| v * s).collect() }
    }

    pub fn frobenius_norm(&self) -> T {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values.iter().zip(&other.values).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, values: self.values.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize<T: Scalar>(v: &Vector<T>) -> Result<Vector<T>> {
    let n = v.norm();
    if !(n > T::zero()) {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v.map(|x| x / n))
}

/// Gram-Schmidt on the rows of `m`; returns a matrix with orthonormal rows.
/// Requires `rows <= cols` and full row rank.
pub fn orthonormal_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    if m.rows() > m.cols() {
        return shape_err("orthonormal rows need rows <= cols");
    }
    let mut out: Vec<Vector<T>> = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let mut v = Vector::from_vec(m.row(i).to_vec());
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for q in &out {
                let p = v.dot(q);
                v.axpy(-p, q);
            }
        }
        out.push(l2_normalize(&v)?);
    }
    Matrix::from_rows(&out)
}
