//! Dense row-major matrices and the small set of factorizations the
//! calibration pipeline needs: symmetric eigendecomposition (cyclic Jacobi),
//! thin SVD (one-sided Jacobi) and Cholesky solves.
//!
//! Everything here is deterministic: sweep order is fixed and there is no
//! randomized pivoting, so identical inputs give bit-identical outputs.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::scalar::Scalar;

/// Maximum number of Jacobi sweeps before reporting non-convergence.
pub const JACOBI_SWEEP_CAP: usize = 100;
/// Relative off-diagonal threshold at which Jacobi iterations stop.
pub const JACOBI_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
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

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, checking the length.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure_len("DenseMatrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Like [`from_vec`](Self::from_vec) but also rejects non-finite entries.
    pub fn from_vec_finite(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        let m = Self::from_vec(rows, cols, data)?;
        if !m.is_finite() {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_len("DenseMatrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    /// Column vector times row vector.
    pub fn outer(u: &[T], v: &[T]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Keeps the first `n` columns.
    pub fn leading_columns(&self, n: usize) -> Self {
        Self::from_fn(self.rows, n, |i, j| self[(i, j)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        ensure_len("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
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

    /// `self · x`
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        ensure_len("matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x`
    pub fn tr_matvec(&self, x: &[T]) -> Result<Vec<T>> {
        ensure_len("tr_matvec", self.rows, x.len())?;
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_len("elementwise rows", self.rows, other.rows)?;
        ensure_len("elementwise cols", self.cols, other.cols)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Largest `|m_ij − m_ji|`; zero for symmetric input.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = (self[(i, j)] - self[(j, i)]).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Averages the matrix with its transpose.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)]) * T::lit(0.5)
        })
    }

    /// Converts element type, e.g. `f64` to `f32`.
    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig<T> {
    /// Sorted in descending order.
    pub values: Vec<T>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: DenseMatrix<T>,
}

impl<T: Scalar> SymEig<T> {
    /// Rebuilds `V f(Λ) Vᵀ` for a spectral function `f`.
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> DenseMatrix<T> {
        let n = self.values.len();
        let fv: Vec<T> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n).fold(T::zero(), |acc, k| acc + v[(i, k)] * fv[k] * v[(j, k)])
        })
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig<T: Scalar>(m: &DenseMatrix<T>) -> Result<SymEig<T>> {
    if !m.is_square() {
        return Err(Error::dims("sym_eig square", m.rows(), m.cols()));
    }
    let n = m.rows();
    let scale = m.max_abs().max(T::one());
    let asym = m.asymmetry();
    if asym > T::tolerance(1e-8) * scale {
        return Err(Error::NotSymmetric(asym.as_f64()));
    }
    let mut a = m.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let fro = a.frobenius_norm();
    let tol = T::tolerance(JACOBI_THRESHOLD);

    let mut converged = fro == T::zero();
    for _ in 0..JACOBI_SWEEP_CAP {
        if converged {
            break;
        }
        let off = off_diagonal_norm(&a);
        if off <= tol * fro {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol * fro {
        return Err(Error::NoConvergence("symmetric Jacobi eigensolver"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(SymEig { values, vectors })
}

fn off_diagonal_norm<T: Scalar>(a: &DenseMatrix<T>) -> T {
    let mut acc = T::zero();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Thin singular value decomposition `m = U diag(s) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    /// `rows × k` with orthonormal columns.
    pub u: DenseMatrix<T>,
    /// Descending, non-negative, length `k`.
    pub s: Vec<T>,
    /// `cols × k` with orthonormal columns.
    pub v: DenseMatrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let k = self.s.len();
        DenseMatrix::from_fn(self.u.rows(), self.v.rows(), |i, j| {
            (0..k).fold(T::zero(), |acc, l| {
                acc + self.u[(i, l)] * self.s[l] * self.v[(j, l)]
            })
        })
    }

    /// Keeps the leading `r` singular triplets.
    pub fn truncate(mut self, r: usize) -> Result<Self> {
        if r > self.s.len() {
            return Err(Error::RankOutOfRange {
                rank: r,
                max: self.s.len(),
            });
        }
        self.u = self.u.leading_columns(r);
        self.v = self.v.leading_columns(r);
        self.s.truncate(r);
        Ok(self)
    }
}

/// Thin SVD via one-sided (Hestenes) Jacobi orthogonalization.
pub fn svd<T: Scalar>(m: &DenseMatrix<T>) -> Result<Svd<T>> {
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let (rows, n) = m.shape();
    // Work column-major on the columns being orthogonalized.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| m.column(j)).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let tol = T::tolerance(JACOBI_THRESHOLD);

    let mut converged = false;
    for _ in 0..JACOBI_SWEEP_CAP {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence("one-sided Jacobi SVD"));
    }

    let sigmas: Vec<T> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        sigmas[j]
            .partial_cmp(&sigmas[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let smax = sigmas.iter().fold(T::zero(), |a, &b| a.max(b));
    let negligible = smax * T::epsilon() * T::lit(rows.max(n) as f64);

    let mut ucols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vout: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &j in &order {
        let sj = sigmas[j];
        if sj > negligible && sj > T::zero() {
            ucols.push(cols[j].iter().map(|&x| x / sj).collect());
            s.push(sj);
        } else {
            deficient.push(ucols.len());
            ucols.push(vec![T::zero(); rows]);
            s.push(T::zero());
        }
        vout.push(vcols[j].clone());
    }
    complete_orthonormal(&mut ucols, &deficient);

    let u = DenseMatrix::from_fn(rows, n, |i, k| ucols[k][i]);
    let v = DenseMatrix::from_fn(n, n, |i, k| vout[k][i]);
    Ok(Svd { u, s, v })
}

/// Best rank-`r` approximation factors (Eckart–Young).
pub fn truncated_svd<T: Scalar>(m: &DenseMatrix<T>, r: usize) -> Result<Svd<T>> {
    let max = m.rows().min(m.cols());
    if r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    svd(m)?.truncate(r)
}

fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed zero columns with unit vectors orthogonal to the rest.
fn complete_orthonormal<T: Scalar>(cols: &mut [Vec<T>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0usize;
    for &slot in missing {
        while candidate < dim {
            let mut e = vec![T::zero(); dim];
            e[candidate] = T::one();
            candidate += 1;
            // Two Gram-Schmidt passes keep the result orthogonal to working precision.
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && norm(c) == T::zero()) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, &ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let n = norm(&e);
            if n > T::lit(1e-3) {
                cols[slot] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if !a.is_square() {
        return Err(Error::dims("cholesky square", a.rows(), a.cols()));
    }
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn solve_spd<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    ensure_len("solve_spd rhs rows", a.rows(), b.rows())?;
    let l = cholesky(a)?;
    let n = a.rows();
    let mut x = b.clone();
    for col in 0..b.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, col)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    Ok(x)
}
