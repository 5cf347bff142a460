//! Dense row-major matrices, thin SVD, orthonormal bases, projections and
//! principal angles.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is accurate to a few
//! ulps in the singular values at the sizes used here (at most a few hundred
//! per side) and has no external numerics dependency.

use std::ops::{Index, IndexMut};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
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

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(invalid("rows have unequal lengths"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
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

    /// `d × 1` matrix holding `v`.
    pub fn column_vector(v: &[T]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Stacks column vectors side by side into a `len × count` matrix.
    pub fn from_columns<C: AsRef<[T]>>(columns: &[C]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.as_ref().len());
        if columns.iter().any(|c| c.as_ref().len() != rows) {
            return Err(invalid("columns have unequal lengths"));
        }
        let m = Self::from_fn(rows, columns.len(), |i, j| columns[j].as_ref()[i]);
        if !m.is_finite() {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(m)
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(invalid(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let rhs_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a vector `v` of length `cols`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(invalid(format!(
                "cannot apply {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(invalid("matrix shapes differ"));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn scale(&self, alpha: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * alpha).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        norm(&self.data)
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |i, j| self[(i, cols[j])])
    }

    /// Largest absolute deviation of `selfᵀ·self` from the identity.
    pub fn gram_deviation(&self) -> T {
        let mut worst = T::zero();
        for a in 0..self.cols {
            for b in a..self.cols {
                let g: T = (0..self.rows).map(|i| self[(i, a)] * self[(i, b)]).sum();
                let target = if a == b { T::one() } else { T::zero() };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

/// Thin singular value decomposition `m = u · diag(s) · vt`.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: Matrix<T>,
    /// Nonnegative, descending.
    pub s: Vec<T>,
    /// `k × cols` with orthonormal rows.
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    /// Number of singular values above `rank_tolerance · s[0]`.
    pub fn rank(&self) -> usize {
        let Some(&top) = self.s.first() else { return 0 };
        if top == T::zero() {
            return 0;
        }
        let cut = top * T::rank_tolerance();
        self.s.iter().filter(|&&v| v > cut).count()
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul(&self.vt).expect("svd factors have compatible shapes")
    }
}

pub fn thin_svd<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(invalid("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(invalid("svd input has non-finite entries"));
    }
    if m.rows() < m.cols() {
        let t = thin_svd(&m.transpose())?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }

    let rows = m.rows();
    let n = m.cols();
    // Columns of m (rotated in place) and of V, stored contiguously.
    let mut a: Vec<Vec<T>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    let two = T::lit(2.0);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = norm_sq(&a[p]);
                let beta = norm_sq(&a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (two * gamma);
                let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<T> = a.iter().map(|col| norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let s: Vec<T> = order.iter().map(|&j| norms[j]).collect();
    let cut = s[0] * T::rank_tolerance();
    let mut u_cols: Vec<Vec<T>> = order
        .iter()
        .map(|&j| {
            if norms[j] > cut {
                a[j].iter().map(|&x| x / norms[j]).collect()
            } else {
                vec![T::zero(); rows]
            }
        })
        .collect();
    orthonormalize_columns(&mut u_cols);

    let u = Matrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    let vt = Matrix::from_fn(n, n, |i, j| v[order[i]][j]);
    Ok(SvdResult { u, s, vt })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (ap, aq) = (*xp, *xq);
        *xp = c * ap - s * aq;
        *xq = s * ap + c * aq;
    }
}

/// Modified Gram-Schmidt (two passes) over the columns in order. Columns that
/// collapse, including the zero placeholders for null singular values, are
/// replaced with the first standard basis vector independent of the rest.
fn orthonormalize_columns<T: Scalar>(cols: &mut [Vec<T>]) {
    let dim = cols.first().map_or(0, Vec::len);
    let half = T::lit(0.5);
    for j in 0..cols.len() {
        let original = norm(&cols[j]);
        let mut candidate = cols[j].clone();
        project_out(&mut candidate, &cols[..j]);
        let kept = norm(&candidate);
        if original > T::zero() && kept > half * original {
            cols[j] = candidate.iter().map(|&x| x / kept).collect();
            continue;
        }
        for e in 0..dim {
            let mut basis = vec![T::zero(); dim];
            basis[e] = T::one();
            project_out(&mut basis, &cols[..j]);
            let len = norm(&basis);
            if len > half {
                cols[j] = basis.iter().map(|&x| x / len).collect();
                break;
            }
        }
    }
}

fn project_out<T: Scalar>(v: &mut [T], basis: &[Vec<T>]) {
    for _ in 0..2 {
        for b in basis {
            let coef = dot(v, b);
            for (x, &y) in v.iter_mut().zip(b) {
                *x -= coef * y;
            }
        }
    }
}

/// Orthonormal `cols × k` basis of the top-`k` right-singular subspace of `m`.
pub fn orthonormal_basis<T: Scalar>(m: &Matrix<T>, k: usize) -> Result<Matrix<T>> {
    if k == 0 {
        return Err(invalid("basis dimension must be at least 1"));
    }
    if k > m.rows().min(m.cols()) {
        return Err(invalid(format!(
            "basis dimension {k} exceeds min({}, {})",
            m.rows(),
            m.cols()
        )));
    }
    let svd = thin_svd(m)?;
    Ok(Matrix::from_fn(m.cols(), k, |i, j| svd.vt[(j, i)]))
}

/// `sin²` of the principal angles between `span(u1)` and `span(u2)`.
///
/// Returns `min(cols)` values in ascending order (descending cosines).
pub fn principal_angle_sines_squared<T: Scalar>(u1: &Matrix<T>, u2: &Matrix<T>) -> Result<Vec<T>> {
    if u1.rows() != u2.rows() {
        return Err(invalid(format!(
            "bases live in different spaces ({} vs {} rows)",
            u1.rows(),
            u2.rows()
        )));
    }
    if u1.cols() == 0 || u2.cols() == 0 {
        return Err(invalid("basis has no columns"));
    }
    for (name, u) in [("first", u1), ("second", u2)] {
        let dev = u.gram_deviation();
        if !(dev <= T::gram_tolerance()) {
            return Err(invalid(format!(
                "{name} basis is not orthonormal (Gram deviation {dev})"
            )));
        }
    }
    let (small, large) = if u1.cols() <= u2.cols() { (u1, u2) } else { (u2, u1) };
    let cross = small.t_matmul(large)?;
    let svd = thin_svd(&cross)?;
    Ok(svd
        .s
        .iter()
        .map(|&c| {
            let c = c.max(T::zero()).min(T::one());
            T::one() - c * c
        })
        .collect())
}

/// Orthogonal projection `basis · (basisᵀ · v)` of the columns of `v`.
pub fn project_onto<T: Scalar>(basis: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    if basis.rows() != v.rows() {
        return Err(invalid(format!(
            "basis has {} rows but v has {}",
            basis.rows(),
            v.rows()
        )));
    }
    basis.matmul(&basis.t_matmul(v)?)
}
