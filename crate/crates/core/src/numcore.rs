//! Dense vector and symmetric-matrix primitives.
//!
//! Everything here works in `f64`. Symmetric matrices are stored densely
//! (full `d x d`, row-major) and every mutating operation writes both
//! triangles from the same computed value so the storage stays exactly
//! symmetric.

use std::ops::{Deref, DerefMut};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix is not positive definite (pivot {pivot} has value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("non-finite entry at index {0}")]
    NonFinite(usize),

    #[error("dimension must be positive")]
    ZeroDimension,
}

fn check_dim(expected: usize, actual: usize) -> Result<(), NumError> {
    if expected != actual {
        return Err(NumError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// A dense row vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector(data)
    }

    /// Builds a vector, rejecting non-finite entries.
    pub fn try_from_vec(data: Vec<f64>) -> Result<Self, NumError> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        Ok(Vector(data))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean norm of `a - b`.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `acc += scale * v`
pub fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// A dense symmetric `dim x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymmetricMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = v;
        }
        m
    }

    /// Wraps row-major data, checking that it is square, finite and exactly
    /// symmetric.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self, NumError> {
        check_dim(dim * dim, data.len())?;
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        for r in 0..dim {
            for c in (r + 1)..dim {
                if data[r * dim + c] != data[c * dim + r] {
                    return Err(NumError::NotSymmetric { row: r, col: c });
                }
            }
        }
        Ok(SymmetricMatrix { dim, data })
    }

    /// Wraps row-major data and replaces it with `(m + mᵀ) / 2`.
    pub fn symmetrized(dim: usize, mut data: Vec<f64>) -> Result<Self, NumError> {
        check_dim(dim * dim, data.len())?;
        for r in 0..dim {
            for c in (r + 1)..dim {
                let avg = 0.5 * (data[r * dim + c] + data[c * dim + r]);
                data[r * dim + c] = avg;
                data[c * dim + r] = avg;
            }
        }
        Self::from_row_major(dim, data)
    }

    /// Rebuilds a matrix from its packed upper triangle (row by row).
    pub fn from_upper_triangle(dim: usize, packed: &[f64]) -> Result<Self, NumError> {
        check_dim(dim * (dim + 1) / 2, packed.len())?;
        let mut m = Self::zeros(dim);
        let mut k = 0;
        for r in 0..dim {
            for c in r..dim {
                m.data[r * dim + c] = packed[k];
                m.data[c * dim + r] = packed[k];
                k += 1;
            }
        }
        Ok(m)
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for r in 0..d {
            out.extend_from_slice(&self.data[r * d + r..(r + 1) * d]);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// In-place rank-1 update `self += vᵀv`.
    pub fn add_outer(&mut self, v: &[f64]) -> Result<(), NumError> {
        check_dim(self.dim, v.len())?;
        let d = self.dim;
        for r in 0..d {
            let vr = v[r];
            for c in r..d {
                let updated = self.data[r * d + c] + vr * v[c];
                self.data[r * d + c] = updated;
                self.data[c * d + r] = updated;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &SymmetricMatrix) -> Result<(), NumError> {
        check_dim(self.dim, other.dim)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += value;
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, NumError> {
        check_dim(self.dim, v.len())?;
        Ok((0..self.dim).map(|r| dot(self.row(r), v)).collect())
    }

    /// `vᵀ M v`
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64, NumError> {
        Ok(dot(&self.mul_vec(v)?, v))
    }

    pub fn frobenius_distance(&self, other: &SymmetricMatrix) -> Result<f64, NumError> {
        check_dim(self.dim, other.dim)?;
        Ok(distance(&self.data, &other.data))
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for x in &mut self.data {
            *x *= factor;
        }
        self
    }
}

/// Returns `acc + vᵀv`.
pub fn outer_accumulate(acc: &SymmetricMatrix, v: &[f64]) -> Result<SymmetricMatrix, NumError> {
    let mut out = acc.clone();
    out.add_outer(v)?;
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(m: &SymmetricMatrix) -> Result<Self, NumError> {
        let d = m.dim();
        if d == 0 {
            return Err(NumError::ZeroDimension);
        }
        let mut l = vec![0.0; d * d];
        for j in 0..d {
            let row_j = &l[j * d..j * d + j];
            let pivot = m.get(j, j) - dot(row_j, row_j);
            if pivot <= 0.0 || !pivot.is_finite() {
                return Err(NumError::NotPositiveDefinite {
                    pivot: j,
                    value: pivot,
                });
            }
            let diag = pivot.sqrt();
            l[j * d + j] = diag;
            for i in (j + 1)..d {
                let s = m.get(i, j) - dot(&l[i * d..i * d + j], &l[j * d..j * d + j]);
                l[i * d + j] = s / diag;
            }
        }
        Ok(Cholesky { dim: d, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `M x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, NumError> {
        check_dim(self.dim, rhs.len())?;
        let d = self.dim;
        let l = &self.lower;
        // forward: L y = rhs
        let mut y = rhs.to_vec();
        for i in 0..d {
            let s = y[i] - dot(&l[i * d..i * d + i], &y[..i]);
            y[i] = s / l[i * d + i];
        }
        // backward: Lᵀ x = y
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= l[k * d + i] * y[k];
            }
            y[i] = s / l[i * d + i];
        }
        Ok(y)
    }

    /// Solves one system per right-hand side.
    pub fn solve_columns(&self, columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NumError> {
        columns.iter().map(|c| self.solve(c)).collect()
    }
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn cholesky_solve(m: &SymmetricMatrix, rhs: &[f64]) -> Result<Vec<f64>, NumError> {
    Cholesky::factor(m)?.solve(rhs)
}
