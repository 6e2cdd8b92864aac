// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense binary64 linear algebra used by every analysis: a row-major
//! [`Matrix`], one-sided Jacobi SVD, numerical rank, left null-space bases,
//! row projection, row softmax and Pearson correlation.
//!
//! Everything here is a pure function of its inputs. The SVD is a
//! cyclic one-sided (Hestenes) Jacobi iteration with a fixed pair order, so
//! results are bit-reproducible for a given input.

use std::fmt;

use crate::error::{Error, Result};

/// Maximum number of Jacobi sweeps before the SVD reports non-convergence.
pub const MAX_SWEEPS: usize = 100;

/// Dense row-major matrix of binary64 values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / cols.max(1),
                col: idx % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of arithmetic on finite inputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds a matrix from a slice of equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
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

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(self.mul_unchecked(rhs))
    }

    pub(crate) fn mul_unchecked(&self, rhs: &Matrix) -> Matrix {
        let n = rhs.cols;
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let out_row = &mut out[r * n..(r + 1) * n];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(self.rows, n, out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub(crate) fn mul_transposed(&self, rhs: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, rhs.cols);
        let mut out = vec![0.0; self.rows * rhs.rows];
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..rhs.rows {
                out[r * rhs.rows + c] = dot(a, rhs.row(c));
            }
        }
        Matrix::from_raw(self.rows, rhs.rows, out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub(crate) fn transposed_mul(&self, rhs: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, rhs.rows);
        let n = rhs.cols;
        let mut out = vec![0.0; self.cols * n];
        for k in 0..self.rows {
            let b = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Matrix::from_raw(self.cols, n, out)
    }

    fn check_same_shape(&self, rhs: &Matrix, op: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape(format!(
                "cannot {op} {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "add")?;
        Ok(self.zip_map(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "subtract")?;
        Ok(self.zip_map(rhs, |a, b| a - b))
    }

    pub(crate) fn zip_map(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix::from_raw(self.rows, self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// Largest absolute entry; zero for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `max |self − rhs|` over entries.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Appends a column filled with `value` (used for `[T, 1]`).
    pub fn append_const_col(&self, value: f64) -> Matrix {
        let cols = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.push(value);
        }
        Matrix::from_raw(self.rows, cols, data)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Copy of the columns `start..start + len`.
    pub fn col_block(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }

    /// Copy of the rows `start..start + len`.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_raw(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `M = U · diag(s) · Vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × r` with orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative; length `r = min(m, n)`.
    pub singular_values: Vec<f64>,
    /// `r × n` with orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    /// `U · diag(s) · Vt`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.singular_values) {
                *v *= s;
            }
        }
        us.mul_unchecked(&self.vt)
    }

    pub fn largest(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

/// Column-major working storage for the Jacobi iteration.
struct ColMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColMajor {
    fn from_matrix(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.rows * m.cols);
        for c in 0..m.cols {
            for r in 0..m.rows {
                data.push(m.get(r, c));
            }
        }
        Self { rows: m.rows, cols: m.cols, data }
    }

    /// Columns of `mᵀ`, i.e. the rows of `m`.
    fn from_matrix_transposed(m: &Matrix) -> Self {
        Self { rows: m.cols, cols: m.rows, data: m.data.clone() }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    #[inline]
    fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    #[inline]
    fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(i < j);
        let (lo, hi) = self.data.split_at_mut(j * self.rows);
        (&mut lo[i * self.rows..(i + 1) * self.rows], &mut hi[..self.rows])
    }

    fn norm(&self, c: usize) -> f64 {
        dot(self.col(c), self.col(c)).sqrt()
    }
}

/// Cyclic one-sided Jacobi: finds orthogonal `V` with `B·V = W` having
/// mutually orthogonal columns. Returns `(W, V)`.
fn one_sided_jacobi(mut w: ColMajor) -> Result<(ColMajor, ColMajor)> {
    let (p, q) = (w.rows, w.cols);
    let mut v = ColMajor::identity(q);
    let tol = f64::EPSILON * (p.max(1) as f64).sqrt();
    let frob = dot(&w.data, &w.data).sqrt();
    // Columns below this norm are numerically zero and not rotated further.
    let floor = f64::EPSILON * frob * 1e-3;
    let mut sq: Vec<f64> = (0..q).map(|c| dot(w.col(c), w.col(c))).collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let (alpha, beta) = (sq[i], sq[j]);
                if alpha.sqrt() <= floor || beta.sqrt() <= floor {
                    continue;
                }
                let gamma = dot(w.col(i), w.col(j));
                if gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (wi, wj) = w.pair_mut(i, j);
                rotate(wi, wj, c, s);
                let (vi, vj) = v.pair_mut(i, j);
                rotate(vi, vj, c, s);
                sq[i] = alpha - t * gamma;
                sq[j] = beta + t * gamma;
            }
        }
        // refresh cached norms to stop drift
        for (c, s) in sq.iter_mut().enumerate() {
            *s = dot(w.col(c), w.col(c));
        }
        if !rotated {
            return Ok((w, v));
        }
    }
    Err(Error::SvdNoConvergence { rows: p, cols: q, sweeps: MAX_SWEEPS })
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// Indices sorting `values` in nonincreasing order; ties keep index order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Fills zero columns of `cols` (column vectors of length `n`) so that all
/// of them are orthonormal. `known` marks columns that are already valid.
fn complete_orthonormal(cols: &mut [Vec<f64>], known: &[bool]) {
    let n = cols.first().map_or(0, Vec::len);
    let mut basis: Vec<Vec<f64>> = cols
        .iter()
        .zip(known)
        .filter(|(_, k)| **k)
        .map(|(c, _)| c.clone())
        .collect();
    let mut candidate = 0usize;
    for (c, k) in cols.iter_mut().zip(known) {
        if *k {
            continue;
        }
        // Try canonical vectors until one has a usable residual.
        loop {
            let mut e = vec![0.0; n];
            e[candidate % n] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&e, b);
                    for (x, y) in e.iter_mut().zip(b) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                basis.push(e.clone());
                *c = e;
                break;
            }
        }
    }
}

/// Thin SVD by one-sided Jacobi on whichever orientation has fewer columns.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::Invalid("svd of an empty matrix".into()));
    }
    let tall = m.rows >= m.cols;
    let work = if tall {
        ColMajor::from_matrix(m)
    } else {
        ColMajor::from_matrix_transposed(m)
    };
    let (w, v) = one_sided_jacobi(work).map_err(|e| match e {
        Error::SvdNoConvergence { sweeps, .. } => {
            Error::SvdNoConvergence { rows: m.rows, cols: m.cols, sweeps }
        }
        other => other,
    })?;
    let r = w.cols;
    let norms: Vec<f64> = (0..r).map(|c| w.norm(c)).collect();
    let order = descending_order(&norms);
    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let s1 = s.first().copied().unwrap_or(0.0);

    // Left factor of the Jacobi orientation: normalized W columns.
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut known = Vec::with_capacity(r);
    for &i in &order {
        let n = norms[i];
        if n > f64::MIN_POSITIVE && n > s1 * f64::EPSILON * 1e-3 {
            left.push(w.col(i).iter().map(|x| x / n).collect());
            known.push(true);
        } else {
            left.push(vec![0.0; w.rows]);
            known.push(false);
        }
    }
    complete_orthonormal(&mut left, &known);
    let right: Vec<&[f64]> = order.iter().map(|&i| v.col(i)).collect();

    // For the tall case: U = left columns, Vt = Vᵀ.
    // For the wide case: Mᵀ = left·S·Vᵀ, so U = V and Vt = leftᵀ.
    let (u, vt) = if tall {
        let u = Matrix::from_fn(m.rows, r, |row, c| left[c][row]);
        let vt = Matrix::from_fn(r, m.cols, |row, c| right[row][c]);
        (u, vt)
    } else {
        let u = Matrix::from_fn(m.rows, r, |row, c| right[c][row]);
        let vt = Matrix::from_fn(r, m.cols, |row, c| left[row][c]);
        (u, vt)
    };
    Ok(SvdResult { u, singular_values: s, vt })
}

/// Full orthogonal basis of `R^m` adapted to the column space of `M`:
/// singular values (length `m`, nonincreasing, padded with zeros) and the
/// matching left singular vectors as rows of an `m × m` matrix.
struct LeftSpectrum {
    sigma: Vec<f64>,
    vectors: Matrix,
}

/// Householder QR of a tall `m × n` matrix; returns the full `Q` (`m × m`)
/// and the leading `n × n` block of `R`.
fn householder_qr(m: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = m.shape();
    let mut r = m.clone();
    let mut q = Matrix::identity(rows);
    for j in 0..cols.min(rows) {
        let mut v: Vec<f64> = (j..rows).map(|i| r.get(i, j)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for c in j..cols {
            let proj: f64 = (j..rows).map(|i| v[i - j] * r.get(i, c)).sum();
            for i in j..rows {
                let val = r.get(i, c) - 2.0 * proj * v[i - j];
                r.set(i, c, val);
            }
        }
        for row in 0..rows {
            let qrow = &mut q.row_mut(row)[j..];
            let proj = dot(qrow, &v);
            for (x, y) in qrow.iter_mut().zip(&v) {
                *x -= 2.0 * proj * y;
            }
        }
    }
    let r1 = Matrix::from_fn(cols, cols, |i, c| if i <= c { r.get(i, c) } else { 0.0 });
    (q, r1)
}

fn left_spectrum(m: &Matrix) -> Result<LeftSpectrum> {
    let (rows, cols) = m.shape();
    if rows == 0 {
        return Ok(LeftSpectrum { sigma: vec![], vectors: Matrix::zeros(0, 0) });
    }
    if cols == 0 {
        return Ok(LeftSpectrum { sigma: vec![0.0; rows], vectors: Matrix::identity(rows) });
    }
    if rows > cols {
        // M = Q·[R1; 0]: the trailing rows of Q are exact left null vectors and
        // the rest follow from the spectrum of R1.
        let (q, r1) = householder_qr(m);
        let inner = left_spectrum(&r1)?;
        let mut sigma = inner.sigma;
        sigma.resize(rows, 0.0);
        // basis rows: y·Qᵀ for y = inner vector padded with zeros, plus e_k·Qᵀ
        let mut vectors = Matrix::zeros(rows, rows);
        for b in 0..cols {
            let y = inner.vectors.row(b);
            for i in 0..rows {
                vectors.set(b, i, dot(y, &q.row(i)[..cols]));
            }
        }
        for b in cols..rows {
            for i in 0..rows {
                vectors.set(b, i, q.get(i, b));
            }
        }
        return Ok(LeftSpectrum { sigma, vectors });
    }
    // Columns of Mᵀ are the rows of M; V (rows × rows) spans R^rows.
    let (w, v) = one_sided_jacobi(ColMajor::from_matrix_transposed(m)).map_err(|e| match e {
        Error::SvdNoConvergence { sweeps, .. } => Error::SvdNoConvergence { rows, cols, sweeps },
        other => other,
    })?;
    let norms: Vec<f64> = (0..rows).map(|c| w.norm(c)).collect();
    let order = descending_order(&norms);
    let sigma = order.iter().map(|&i| norms[i]).collect();
    let vectors = Matrix::from_fn(rows, rows, |b, i| v.col(order[b])[i]);
    Ok(LeftSpectrum { sigma, vectors })
}

/// Default numerical rank tolerance `max(m, n) · ε · s₁`.
pub fn default_tolerance(rows: usize, cols: usize, s1: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * s1
}

fn rank_from_sigma(sigma: &[f64], rows: usize, cols: usize, tol: Option<f64>) -> usize {
    let s1 = sigma.first().copied().unwrap_or(0.0);
    let tol = tol.unwrap_or_else(|| default_tolerance(rows, cols, s1));
    sigma
        .iter()
        .take(rows.min(cols))
        .filter(|&&s| s > tol)
        .count()
}

/// Number of singular values above `tol` (default `max(m,n)·ε·s₁`).
pub fn numerical_rank(m: &Matrix, tol: Option<f64>) -> Result<usize> {
    let spec = left_spectrum(m)?;
    Ok(rank_from_sigma(&spec.sigma, m.rows, m.cols, tol))
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(left_spectrum(m)?.sigma.first().copied().unwrap_or(0.0))
}

/// Orthonormal row basis `B` (`k × m`) of the left null space
/// `{x : x·M = 0}`, with `k = m − numerical_rank(M, tol)`.
pub fn left_nullspace_basis(m: &Matrix, tol: Option<f64>) -> Result<Matrix> {
    let spec = left_spectrum(m)?;
    let rank = rank_from_sigma(&spec.sigma, m.rows, m.cols, tol);
    let k = m.rows - rank;
    Ok(spec.vectors.row_block(rank, k))
}

/// Maximum deviation of `B·Bᵀ` from the identity.
pub fn orthonormality_error(basis: &Matrix) -> f64 {
    let gram = basis.mul_transposed(basis);
    let mut worst: f64 = 0.0;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

/// Projects each row of `a` onto the span of the orthonormal rows of `basis`.
pub fn project_rows_onto_subspace(a: &Matrix, basis: &Matrix) -> Result<Matrix> {
    if basis.rows() == 0 {
        return Ok(Matrix::zeros(a.rows(), a.cols()));
    }
    if basis.cols() != a.cols() {
        return Err(Error::Shape(format!(
            "basis has {} columns but rows have length {}",
            basis.cols(),
            a.cols()
        )));
    }
    let err = orthonormality_error(basis);
    if err > 1e-8 {
        return Err(Error::NotOrthonormal(err));
    }
    let coeffs = a.mul_transposed(basis);
    Ok(coeffs.mul_unchecked(basis))
}

/// Softmax of one row with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    /// Eigenvalues of a symmetric matrix by classical two-sided Jacobi.
    fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        for _ in 0..200 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a.get(p, q).powi(2);
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a.get(k, p), a.get(k, q));
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a.get(p, k), a.get(q, k));
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    /// Rank by Gaussian elimination with partial pivoting.
    fn elimination_rank(m: &Matrix, tol: f64) -> usize {
        let mut a = m.clone();
        let (rows, cols) = a.shape();
        let mut rank = 0;
        for c in 0..cols {
            let pivot = (rank..rows).max_by(|&x, &y| a.get(x, c).abs().total_cmp(&a.get(y, c).abs()));
            let Some(p) = pivot else { break };
            if a.get(p, c).abs() <= tol {
                continue;
            }
            for k in 0..cols {
                let tmp = a.get(rank, k);
                a.set(rank, k, a.get(p, k));
                a.set(p, k, tmp);
            }
            for r in (rank + 1)..rows {
                let f = a.get(r, c) / a.get(rank, c);
                for k in c..cols {
                    let v = a.get(r, k) - f * a.get(rank, k);
                    a.set(r, k, v);
                }
            }
            rank += 1;
        }
        rank
    }

    fn check_svd(m: &Matrix) {
        let res = svd(m).unwrap();
        let r = m.rows().min(m.cols());
        assert_eq!(res.singular_values.len(), r);
        assert!(res.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(orthonormality_error(&res.u.transpose()) <= 1e-10);
        assert!(orthonormality_error(&res.vt) <= 1e-10);
        let err = res.reconstruct().max_abs_diff(m).unwrap();
        assert!(err <= 1e-9 * (1.0 + m.max_abs()), "reconstruction error {err}");
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(Matrix::new(1, 2, vec![1.0, f64::NAN]), Err(Error::NonFinite { row: 0, col: 1 })));
        assert!(matches!(Matrix::new(2, 2, vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let res = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(res.singular_values, vec![1.0, 1.0, 1.0]);
        let res = svd(&Matrix::diag(&[3.0, 2.0, 0.0])).unwrap();
        assert_eq!(res.singular_values, vec![3.0, 2.0, 0.0]);
        check_svd(&Matrix::diag(&[3.0, 2.0, 0.0]));
    }

    #[test]
    fn svd_matches_gram_eigenvalues() {
        let m = gaussian(5, 3, 11);
        let res = svd(&m).unwrap();
        let ev = symmetric_eigenvalues(&m.transpose().matmul(&m).unwrap());
        for (s, e) in res.singular_values.iter().zip(&ev) {
            assert!((s * s - e).abs() <= 1e-8 * (1.0 + e.abs()), "{s} vs {e}");
        }
    }

    #[test]
    fn svd_shapes_wide_tall_and_rank_deficient() {
        check_svd(&gaussian(5, 3, 1));
        check_svd(&gaussian(3, 7, 2));
        let low = gaussian(8, 2, 3).matmul(&gaussian(2, 6, 4)).unwrap();
        check_svd(&low);
        let res = svd(&low).unwrap();
        assert!(res.singular_values[2] < 1e-12 * res.singular_values[0]);
    }

    #[test]
    fn svd_is_deterministic() {
        let m = gaussian(9, 6, 5);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.singular_values, b.singular_values);
        assert_eq!(a.vt, b.vt);
    }

    #[test]
    fn svd_empty_is_an_error() {
        assert!(svd(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::zeros(4, 4), None).unwrap(), 0);
        let g = gaussian(10, 4, 7);
        assert_eq!(elimination_rank(&g, 1e-12), 4);
        assert_eq!(numerical_rank(&g, None).unwrap(), 4);
        let u: Vec<f64> = (1..=6).map(f64::from).collect();
        let v = [2.0, -1.0, 0.5, 3.0];
        let outer = Matrix::from_fn(6, 4, |r, c| u[r] * v[c]);
        assert_eq!(numerical_rank(&outer, None).unwrap(), 1);
        // explicit tolerance override
        assert_eq!(numerical_rank(&Matrix::diag(&[1.0, 1e-3]), Some(1e-2)).unwrap(), 1);
    }

    #[test]
    fn left_nullspace_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let b = left_nullspace_basis(&m, None).unwrap();
        assert_eq!(b.shape(), (1, 3));
        assert!((b.get(0, 2).abs() - 1.0).abs() < 1e-14);
        assert!(b.matmul(&m).unwrap().max_abs() < 1e-14);

        let wide = gaussian(4, 8, 8);
        assert_eq!(left_nullspace_basis(&wide, None).unwrap().shape(), (0, 4));

        let prod = gaussian(10, 8, 9)
            .matmul(&gaussian(8, 4, 10))
            .unwrap()
            .matmul(&gaussian(4, 8, 11))
            .unwrap();
        let b = left_nullspace_basis(&prod, None).unwrap();
        assert_eq!(b.rows(), 6);
        assert!(orthonormality_error(&b) < 1e-12);
        let s1 = spectral_norm(&prod).unwrap();
        assert!(b.matmul(&prod).unwrap().max_abs() <= 1e-9 * s1);
    }

    #[test]
    fn projection_examples() {
        let a = gaussian(3, 5, 12);
        let empty = Matrix::zeros(0, 5);
        assert_eq!(project_rows_onto_subspace(&a, &empty).unwrap(), Matrix::zeros(3, 5));

        let basis = left_nullspace_basis(&gaussian(5, 2, 13), None).unwrap();
        let in_span = gaussian(4, 3, 14).matmul(&basis).unwrap();
        let p = project_rows_onto_subspace(&in_span, &basis).unwrap();
        assert!(p.max_abs_diff(&in_span).unwrap() < 1e-12);

        let p = project_rows_onto_subspace(&a, &basis).unwrap();
        let resid = a.sub(&p).unwrap();
        assert!(resid.mul_transposed(&basis).max_abs() < 1e-10);
        let again = project_rows_onto_subspace(&p, &basis).unwrap();
        assert!(again.max_abs_diff(&p).unwrap() < 1e-10);

        let bad = Matrix::from_rows(&[vec![1.0, 1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(project_rows_onto_subspace(&a, &bad), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap());
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.row(1).iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
        let sat = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!((sat.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(sat.get(0, 1) < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // direct formula: means 2.5, cov sum 4, var sums 5 and 5 -> 0.8
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation)));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn svd_reconstructs(rows in 1usize..24, cols in 1usize..24, seed in any::<u64>()) {
                check_svd(&gaussian(rows, cols, seed));
            }

            #[test]
            fn rank_plus_nullity(rows in 1usize..20, cols in 1usize..20, inner in 1usize..8, seed in any::<u64>()) {
                let m = gaussian(rows, inner, seed).matmul(&gaussian(inner, cols, seed ^ 0xabc)).unwrap();
                let rank = numerical_rank(&m, None).unwrap();
                let basis = left_nullspace_basis(&m, None).unwrap();
                prop_assert_eq!(rank + basis.rows(), rows);
                prop_assert_eq!(rank, inner.min(rows).min(cols));
            }

            #[test]
            fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
                let m = Matrix::new(1, vals.len(), vals).unwrap();
                let s = softmax_rows(&m);
                prop_assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(0).iter().all(|&v| v > 0.0));
            }
        }
    }
}
