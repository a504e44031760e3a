//! Dense vector/matrix arithmetic and deterministic random number streams.
//!
//! Everything downstream builds on these three types. `Vector` and `Matrix`
//! are plain row-major `f64` containers — no BLAS, no sparsity — sized for
//! desk-scale problems (hundreds of parameters). `RngStream` wraps a
//! counter-based generator so that per-task streams are reproducible and
//! independent of scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("empty vector not allowed")]
    Empty,
    #[error("non-finite entry at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("matrix shape {rows}x{cols} does not match data length {len}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("matrix not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {delta}")]
    NotSymmetric { i: usize, j: usize, delta: f64 },
    #[error("matrix not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Dense 64-bit float vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Checked constructor: rejects empty vectors and non-finite entries.
    pub fn new(data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.is_empty() {
            return Err(NumericsError::Empty);
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(NumericsError::NonFinite { index, value });
            }
        }
        Ok(Self { data })
    }

    /// Unchecked construction for values produced by internal arithmetic.
    /// Training drivers test finiteness at the point results feed downstream.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Self { data: data.to_vec() }
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { data: vec![1.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "vector add: length mismatch");
        Vector::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "vector sub: length mismatch");
        Vector::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector::from_vec(self.data.iter().map(|a| a * c).collect())
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "hadamard: length mismatch");
        Vector::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        )
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Euclidean norm; the dual norm used throughout the regret bounds
/// (l2 is self-dual and matches the quadratic divergence geometry).
pub fn norm2(x: &Vector) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Self { data, rows: r, cols: c }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn col(&self, j: usize) -> Vector {
        Vector::from_vec((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn set_col(&mut self, j: usize, v: &Vector) {
        assert_eq!(v.len(), self.rows, "set_col: length mismatch");
        for i in 0..self.rows {
            self.set(i, j, v[i]);
        }
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Symmetry check: |a_ij - a_ji| <= 1e-12 * max|a|.
    pub fn check_symmetric(&self) -> Result<(), NumericsError> {
        if self.rows != self.cols {
            return Err(NumericsError::BadShape {
                rows: self.rows,
                cols: self.cols,
                len: self.data.len(),
            });
        }
        let max_abs = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * max_abs.max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let delta = (self.get(i, j) - self.get(j, i)).abs();
                if delta > tol {
                    return Err(NumericsError::NotSymmetric { i, j, delta });
                }
            }
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

/// Dense matrix-vector product.
pub fn matvec(a: &Matrix, x: &Vector) -> Result<Vector, NumericsError> {
    if a.cols() != x.len() {
        return Err(NumericsError::DimensionMismatch {
            context: "matvec",
            left: a.cols(),
            right: x.len(),
        });
    }
    let mut out = vec![0.0; a.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = a.row(i).iter().zip(x.iter()).map(|(m, v)| m * v).sum();
    }
    Ok(Vector::from_vec(out))
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn cholesky_solve(a: &Matrix, b: &Vector) -> Result<Vector, NumericsError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NumericsError::BadShape {
            rows: a.rows(),
            cols: a.cols(),
            len: n * n,
        });
    }
    if b.len() != n {
        return Err(NumericsError::DimensionMismatch {
            context: "cholesky_solve",
            left: n,
            right: b.len(),
        });
    }
    // Lower-triangular factor, row by row.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(NumericsError::NotPositiveDefinite { row: i, pivot: sum });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    Ok(Vector::from_vec(x))
}

/// Deterministic, splittable random stream.
///
/// Backed by a counter-based generator: identical `(seed, stream_id)` pairs
/// replay bit-identical sequences on every platform, and distinct stream ids
/// give statistically independent streams. Streams are single-owner; spawn
/// substreams for parallel work instead of sharing.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

// splitmix64 finalizer; mixes substream salts into fresh stream ids.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream for parallel work. The child id depends only on
    /// `(parent stream_id, salt)`, never on how much of the parent
    /// sequence was consumed, so task scheduling cannot perturb results.
    pub fn substream(&self, salt: u64) -> RngStream {
        let child = mix64(self.stream_id ^ mix64(salt));
        RngStream::new(self.seed, child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Vector of standard normal draws.
    pub fn normal_vector(&mut self, len: usize) -> Vector {
        Vector::from_vec((0..len).map(|_| self.normal()).collect())
    }
}

/// Entrywise Gaussian sample: `mean + stddev .* z` with `z` standard normal.
pub fn sample_gaussian(
    rng: &mut RngStream,
    mean: &Vector,
    stddev: &Vector,
) -> Result<Vector, NumericsError> {
    if mean.len() != stddev.len() {
        return Err(NumericsError::DimensionMismatch {
            context: "sample_gaussian",
            left: mean.len(),
            right: stddev.len(),
        });
    }
    let mut out = Vec::with_capacity(mean.len());
    for i in 0..mean.len() {
        let z: f64 = rng.normal();
        out.push(mean[i] + stddev[i] * z);
    }
    Ok(Vector::from_vec(out))
}
