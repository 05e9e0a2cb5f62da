//! Dense linear algebra, stable reductions and the seeded random source.
//!
//! Everything is `f64`. Matrices are row-major and small enough that plain
//! loops are the right tool; nothing here tries to be a BLAS.
//!
//! # Random stream
//!
//! [`RngState`] is ChaCha8 (the `rand_chacha` implementation). A state is
//! identified by `(seed, stream)`: the 256-bit key comes from
//! `ChaCha8Rng::seed_from_u64(seed)` and `stream` is the 64-bit ChaCha
//! nonce. The cipher is counter based, so every `(seed, stream)` pair is an
//! independent reproducible sequence on every platform. Normal draws use the
//! ziggurat sampler from `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VosError};

pub type Vector = Vec<f64>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VosError::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(VosError::DimensionMismatch { expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(VosError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(VosError::DimensionMismatch { expected: self.cols, got: v.len() });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(VosError::DimensionMismatch { expected: self.rows, got: v.len() });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            axpy(x, self.row(r), &mut out);
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, no pivoting.
pub fn cholesky(s: &Matrix) -> Result<Matrix> {
    let n = s.rows();
    if s.cols() != n {
        return Err(VosError::DimensionMismatch { expected: n, got: s.cols() });
    }
    for r in 0..n {
        for c in 0..r {
            let diff = (s.get(r, c) - s.get(c, r)).abs();
            if diff > 1e-10 {
                return Err(VosError::NotSymmetric { row: r, col: c, diff });
            }
        }
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let pivot = s.get(j, j) - dot(lj, lj);
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(VosError::NotSpd { pivot: j, value: pivot });
        }
        let d = pivot.sqrt();
        l.data[j * n + j] = d;
        for i in j + 1..n {
            let (upper, lower) = l.data.split_at_mut(i * n);
            let li = &mut lower[..n];
            let v = (s.get(i, j) - dot(&li[..j], &upper[j * n..j * n + j])) / d;
            li[j] = v;
        }
    }
    Ok(l)
}

/// Solve `L·x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vector {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let row = l.row(i);
        x[i] = (b[i] - dot(&row[..i], &x[..i])) / row[i];
    }
    x
}

/// `L·z` for lower-triangular `L`, touching only the lower triangle.
pub fn lower_matvec(l: &Matrix, z: &[f64]) -> Vector {
    (0..l.rows()).map(|i| dot(&l.row(i)[..=i], &z[..=i])).collect()
}

pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(VosError::Empty("logsumexp values"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// `log Σ_k w_k·exp(v_k)` with the max shift taken over `v_k + log w_k`.
pub fn logsumexp_weighted(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(VosError::Empty("logsumexp values"));
    }
    if values.len() != weights.len() {
        return Err(VosError::DimensionMismatch { expected: values.len(), got: weights.len() });
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(VosError::InvalidArgument(format!("energy weight must be positive, got {w}")));
    }
    let max = values
        .iter()
        .zip(weights)
        .map(|(v, w)| v + w.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().zip(weights).map(|(v, w)| w * (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// Max-shifted softmax.
pub fn softmax(values: &[f64]) -> Vector {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vector = values.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// `log(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln softplus(x)`, finite for every finite `x`.
pub fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        x + (-0.5 * x.exp()).ln_1p()
    } else {
        softplus(x).ln()
    }
}

/// Derivative of [`log_softplus`], `σ(x) / softplus(x)`.
pub fn log_softplus_grad(x: f64) -> f64 {
    if x < -30.0 {
        1.0 - 0.5 * x.exp()
    } else {
        sigmoid(x) / softplus(x)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Seeded ChaCha8 stream. See the module docs for the exact construction.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Fresh state sharing this seed but on another stream; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// `n` i.i.d. standard normal draws.
pub fn standard_normal(n: usize, rng: &mut RngState) -> Result<Vector> {
    if n == 0 {
        return Err(VosError::Empty("standard_normal count"));
    }
    Ok((0..n).map(|_| rng.normal()).collect())
}
