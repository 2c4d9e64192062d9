//! Dense double-precision matrices for the offline scale computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix data has {actual} entries, expected {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, actual: usize },
    #[error("empty matrix")]
    Empty,
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("invalid power iteration parameters: tol = {tol}, max_iter = {max_iter}")]
    BadParameters { tol: f64, max_iter: usize },
    #[error("power iteration did not converge in {iterations} iterations (best estimate {best})")]
    NoConvergence { best: f64, iterations: usize },
}

/// Row-major `rows x cols` matrix of doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Vector of doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RealVector(pub Vec<f64>);

impl RealVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        euclidean_norm(&self.0)
    }
}

impl From<Vec<f64>> for RealVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                actual: data.len(),
            });
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

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d, d);
        for i in 0..d {
            m.data[i * d + i] = 1.0;
        }
        m
    }

    pub fn diag(v: &RealVector) -> Self {
        let d = v.len();
        let mut m = Self::zeros(d, d);
        for (i, &x) in v.0.iter().enumerate() {
            m.data[i * d + i] = x;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(r, c, data)
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Multiply row `r` by `v[r]`, i.e. `diag(v) * self`.
    pub fn scale_rows(&self, v: &RealVector) -> Result<Self, LinalgError> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_rows",
                lhs: (v.len(), v.len()),
                rhs: self.shape(),
            });
        }
        let mut out = self.clone();
        for (r, &g) in v.0.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= g);
        }
        Ok(out)
    }
}

pub fn identity(d: usize) -> RealMatrix {
    RealMatrix::identity(d)
}

pub fn diag(v: &RealVector) -> RealMatrix {
    RealMatrix::diag(v)
}

pub fn matmul(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let n = b.cols;
    let mut out = RealMatrix::zeros(a.rows, n);
    if n == 0 {
        return Ok(out);
    }
    // Rows are independent, so the result does not depend on scheduling.
    out.data
        .par_chunks_mut(n)
        .zip(a.data.par_chunks(a.cols.max(1)))
        .for_each(|(out_row, a_row)| {
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b.data[k * n..(k + 1) * n];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        });
    Ok(out)
}

pub fn add(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix, LinalgError> {
    if a.shape() != b.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(RealMatrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn scale(m: &RealMatrix, c: f64) -> RealMatrix {
    m.map(|x| x * c)
}

pub fn frobenius_norm(m: &RealMatrix) -> f64 {
    euclidean_norm(&m.data)
}

pub fn mat_vec(m: &RealMatrix, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.cols, v.len());
    (0..m.rows)
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `m^T v` without materializing the transpose.
pub fn mat_t_vec(m: &RealMatrix, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.rows, v.len());
    let mut out = vec![0.0; m.cols];
    for (r, &vr) in v.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(m.row(r)) {
            *o += x * vr;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
}

/// Largest singular value by power iteration on `m^T m`.
///
/// The start vector is drawn from a generator seeded with `params.seed` on
/// every call, so repeated calls are bitwise reproducible. A zero matrix
/// returns 0 after zero iterations.
pub fn spectral_norm(m: &RealMatrix, params: PowerIteration) -> Result<SpectralEstimate, LinalgError> {
    let PowerIteration { tol, max_iter, seed } = params;
    if tol.is_nan() || tol <= 0.0 || max_iter == 0 {
        return Err(LinalgError::BadParameters { tol, max_iter });
    }
    if m.is_empty() {
        return Err(LinalgError::Empty);
    }
    if m.data.iter().all(|&x| x == 0.0) {
        return Ok(SpectralEstimate {
            value: 0.0,
            iterations: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..m.cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);

    let mut estimate = 0.0f64;
    for it in 1..=max_iter {
        let mv = mat_vec(m, &v);
        let sigma = euclidean_norm(&mv);
        let mut next = mat_t_vec(m, &mv);
        let nn = euclidean_norm(&next);
        if nn == 0.0 {
            // Start vector landed in the null space; restart from a fresh draw.
            v = (0..m.cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize(&mut v);
            continue;
        }
        next.iter_mut().for_each(|x| *x /= nn);
        v = next;

        let change = (sigma - estimate).abs();
        estimate = sigma;
        if it > 1 && change <= tol * sigma {
            return Ok(SpectralEstimate {
                value: sigma,
                iterations: it,
            });
        }
    }
    Err(LinalgError::NoConvergence {
        best: estimate,
        iterations: max_iter,
    })
}

fn normalize(v: &mut [f64]) {
    let n = euclidean_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
