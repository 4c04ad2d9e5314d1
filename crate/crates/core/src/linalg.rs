//! Small dense linear algebra: row-major matrices and Cholesky factorization.
//!
//! Only what the Newton solver and the GP need. Factors are stored as full
//! row-major lower triangles so that the inner loops run over contiguous rows.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_diagonal(&mut self, value: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|x| *x * *x).sum::<T>().sqrt()
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky<T> {
    l: Matrix<T>,
    jitter: T,
}

impl<T: Real> Cholesky<T> {
    /// Plain factorization; `None` if a pivot is not strictly positive.
    pub fn new(a: &Matrix<T>) -> Option<Self> {
        factor(a, T::zero()).map(|l| Self { l, jitter: T::zero() })
    }

    /// Tries `a`, then `a + j·I` for `j = base, 10·base, …` (`retries` attempts).
    pub fn with_jitter_ladder(a: &Matrix<T>, base: T, retries: usize) -> Result<Self> {
        if let Some(l) = factor(a, T::zero()) {
            return Ok(Self { l, jitter: T::zero() });
        }
        Self::jittered(a, base, retries)
    }

    /// Always adds `base·10^k` for the first `k` in `0..=retries` that factors.
    pub fn jittered(a: &Matrix<T>, base: T, retries: usize) -> Result<Self> {
        let ten = T::lit(10.0);
        let mut jitter = base;
        for _ in 0..=retries {
            if let Some(l) = factor(a, jitter) {
                return Ok(Self { l, jitter });
            }
            jitter *= ten;
        }
        Err(Error::IllConditioned {
            retries,
            jitter: (jitter / ten).to_f64_lossy(),
        })
    }

    /// Rebuilds a factorization from a stored lower triangle.
    pub fn from_lower(l: Matrix<T>, jitter: T) -> Self {
        Self { l, jitter }
    }

    pub fn lower(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `ln det(A + jitter·I) = 2 Σ ln L_ii`.
    pub fn ln_det(&self) -> T {
        let two = T::lit(2.0);
        two * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<T>()
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        for i in 0..n {
            let row = self.l.row(i);
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [T]) {
        let n = self.dim();
        for i in (0..n).rev() {
            y[i] /= self.l[(i, i)];
            let yi = y[i];
            let row = self.l.row(i);
            for (yj, &lij) in y[..i].iter_mut().zip(&row[..i]) {
                *yj -= lij * yi;
            }
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// `L⁻¹` as a dense lower-triangular matrix.
    pub fn inverse_lower(&self) -> Matrix<T> {
        // Row form: X_i = (e_i − Σ_{k<i} L_ik X_k) / L_ii. Target rows are handled
        // in blocks so every earlier row X_k is streamed once per block.
        let n = self.dim();
        let l = &self.l.data;
        let mut x = vec![T::zero(); n * n];
        for ib in (0..n).step_by(BLOCK) {
            let ie = (ib + BLOCK).min(n);
            let (done, block) = x.split_at_mut(ib * n);
            for k in 0..ib {
                let xk = &done[k * n..k * n + k + 1];
                for i in ib..ie {
                    let lik = l[i * n + k];
                    let xi = &mut block[(i - ib) * n..(i - ib) * n + k + 1];
                    for (a, b) in xi.iter_mut().zip(xk) {
                        *a -= lik * *b;
                    }
                }
            }
            for i in ib..ie {
                let (before, row) = block.split_at_mut((i - ib) * n);
                for k in ib..i {
                    let lik = l[i * n + k];
                    let xk = &before[(k - ib) * n..(k - ib) * n + k + 1];
                    for (a, b) in row[..k + 1].iter_mut().zip(xk) {
                        *a -= lik * *b;
                    }
                }
                row[i] += T::one();
                let d = l[i * n + i];
                for a in &mut row[..=i] {
                    *a /= d;
                }
            }
        }
        Matrix { rows: n, cols: n, data: x }
    }

    /// `(A + jitter·I)⁻¹ = L⁻ᵀ L⁻¹`, symmetric.
    pub fn inverse(&self) -> Matrix<T> {
        // (A⁻¹)_ab = Σ_{k ≥ max(a,b)} X_ka X_kb with X = L⁻¹; rows a are
        // accumulated in blocks so each X_k is streamed once per block.
        let n = self.dim();
        let x = self.inverse_lower().data;
        let mut out = vec![T::zero(); n * n];
        for ab in (0..n).step_by(BLOCK) {
            let ae = (ab + BLOCK).min(n);
            for k in ab..n {
                let xk = &x[k * n..k * n + k + 1];
                for a in ab..ae.min(k + 1) {
                    let xka = xk[a];
                    let row = &mut out[a * n..a * n + a + 1];
                    for (o, b) in row.iter_mut().zip(&xk[..=a]) {
                        *o += xka * *b;
                    }
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                out[b * n + a] = out[a * n + b];
            }
        }
        Matrix { rows: n, cols: n, data: out }
    }

    /// `L Lᵀ`, for consistency checks.
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.dim();
        Matrix::from_fn(n, n, |i, j| {
            let k = i.min(j) + 1;
            dot(&self.l.row(i)[..k], &self.l.row(j)[..k])
        })
    }
}

/// Row/column block size for the cache-blocked factorizations.
const BLOCK: usize = 48;

/// Right-looking blocked Cholesky of `a + jitter·I` (lower triangle of `a` only).
fn factor<T: Real>(a: &Matrix<T>, jitter: T) -> Option<Matrix<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        data[i * n..i * n + i + 1].copy_from_slice(&a.data[i * n..i * n + i + 1]);
        data[i * n + i] += jitter;
    }
    for kb in (0..n).step_by(BLOCK) {
        let ke = (kb + BLOCK).min(n);
        // Panel: columns kb..ke of every row at or below the diagonal block.
        for j in kb..ke {
            let (top, rest) = data.split_at_mut((j + 1) * n);
            let rj = &mut top[j * n..];
            let d = rj[j] - dot(&rj[kb..j], &rj[kb..j]);
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            rj[j] = d;
            let rj = &top[j * n..];
            for ri in rest.chunks_exact_mut(n) {
                ri[j] = (ri[j] - dot(&ri[kb..j], &rj[kb..j])) / d;
            }
        }
        // Trailing update of the lower triangle below the panel.
        for i in ke..n {
            let (top, rest) = data.split_at_mut(i * n);
            let ri = &mut rest[..n];
            let (seg_i, tail_i) = ri.split_at_mut(ke);
            let seg_i = &seg_i[kb..];
            for j in ke..i {
                let rj = &top[j * n + kb..j * n + ke];
                tail_i[j - ke] -= dot(seg_i, rj);
            }
            tail_i[i - ke] -= dot(seg_i, seg_i);
        }
    }
    Some(Matrix { rows: n, cols: n, data })
}

/// Solves `A x = b` for SPD `A` after symmetric diagonal equilibration, with the
/// Cholesky jitter ladder `base·trace(D A D)/n · 10^k`.
pub fn solve_spd_equilibrated<T: Real>(
    a: &Matrix<T>,
    b: &[T],
    base_rel_jitter: T,
    retries: usize,
) -> Result<Vec<T>> {
    let n = a.nrows();
    let mut scale = vec![T::one(); n];
    for i in 0..n {
        let d = a[(i, i)];
        if d > T::zero() && d.is_finite() {
            scale[i] = T::one() / d.sqrt();
        }
    }
    let scaled = Matrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let base = base_rel_jitter * scaled.trace() / T::from_count(n.max(1));
    let chol = Cholesky::with_jitter_ladder(&scaled, base, retries)?;
    let rhs: Vec<T> = b.iter().zip(&scale).map(|(x, s)| *x * *s).collect();
    let y = chol.solve(&rhs);
    Ok(y.iter().zip(&scale).map(|(x, s)| *x * *s).collect())
}
