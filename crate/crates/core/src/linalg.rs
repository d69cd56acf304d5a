//! Dense and packed lower-triangular linear algebra.
//!
//! [`LowerTriangular`] stores an `n x n` lower-triangular matrix with a strictly
//! positive diagonal as two vectors: the diagonal and the strict lower part in
//! row-major order, i.e. `(1,0), (2,0), (2,1), (3,0), ...` (zero-based).
//! Covariances are never produced through a general inverse; every inverse goes
//! through triangular solves.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative pivot threshold used by [`cholesky`]: a pivot counts as positive
/// only when it exceeds this multiple of the largest input diagonal entry.
pub const PIVOT_TOLERANCE: f64 = 1e-13;

/// Relative tolerance for the symmetry check in [`SymmetricPD::new`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Number of strictly lower-triangular entries of an `n x n` matrix.
#[inline]
pub fn offdiag_len(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Packed position of entry `(i, j)` with `j < i`.
#[inline]
pub fn offdiag_index(i: usize, j: usize) -> usize {
    debug_assert!(j < i);
    i * (i - 1) / 2 + j
}

/// Inverse of [`offdiag_index`]: the `(row, col)` pair stored at packed slot `k`.
pub fn offdiag_position(k: usize) -> (usize, usize) {
    let mut i = 1;
    while offdiag_index(i, 0) + i <= k {
        i += 1;
    }
    (i, k - offdiag_index(i, 0))
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. `cols` is needed for the zero-row case.
    pub fn from_rows(rows: &[Vec<T>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    what: "matrix row",
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

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
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
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
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

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                what: "matrix product inner dimension",
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        check_len("matrix-vector operand", self.cols, v.len())?;
        Ok(self
            .row_iter()
            .map(|r| r.iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    /// Largest absolute entry (zero for an empty matrix).
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
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
pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, found })
    }
}

/// Lower-triangular matrix with strictly positive diagonal, packed.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular<T> {
    n: usize,
    diag: Vec<T>,
    offdiag: Vec<T>,
}

impl<T: Scalar> LowerTriangular<T> {
    /// Validates lengths and diagonal positivity.
    pub fn new(diag: Vec<T>, offdiag: Vec<T>) -> Result<Self> {
        let n = diag.len();
        if n == 0 {
            return Err(Error::InvalidConfig("whitener dimension must be positive".into()));
        }
        check_len("packed off-diagonal", offdiag_len(n), offdiag.len())?;
        for (index, &v) in diag.iter().enumerate() {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::NonPositiveDiagonal {
                    index,
                    value: v.as_f64(),
                });
            }
        }
        Ok(Self { n, diag, offdiag })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            diag: vec![T::one(); n],
            offdiag: vec![T::zero(); offdiag_len(n)],
        }
    }

    pub fn from_diagonal(diag: Vec<T>) -> Result<Self> {
        let k = offdiag_len(diag.len());
        Self::new(diag, vec![T::zero(); k])
    }

    /// Reads the lower triangle of a dense square matrix; the upper triangle is ignored.
    pub fn from_dense_lower(m: &Matrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                what: "square matrix",
                expected: m.rows(),
                found: m.cols(),
            });
        }
        let n = m.rows();
        let diag = (0..n).map(|i| m[(i, i)]).collect();
        let mut offdiag = Vec::with_capacity(offdiag_len(n));
        for i in 1..n {
            for j in 0..i {
                offdiag.push(m[(i, j)]);
            }
        }
        Self::new(diag, offdiag)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn diag(&self) -> &[T] {
        &self.diag
    }

    #[inline]
    pub fn offdiag(&self) -> &[T] {
        &self.offdiag
    }

    pub fn into_parts(self) -> (Vec<T>, Vec<T>) {
        (self.diag, self.offdiag)
    }

    /// Entry `(i, j)`; zero above the diagonal.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => self.diag[i],
            std::cmp::Ordering::Greater => self.offdiag[offdiag_index(i, j)],
            std::cmp::Ordering::Less => T::zero(),
        }
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..=i {
                m[(i, j)] = self.get(i, j);
            }
        }
        m
    }

    /// `Lᵀ y`.
    pub fn transpose_mul(&self, y: &[T]) -> Result<Vec<T>> {
        check_len("whitened vector", self.n, y.len())?;
        Ok((0..self.n)
            .map(|j| (j..self.n).map(|i| self.get(i, j) * y[i]).sum())
            .collect())
    }

    /// `L y`.
    pub fn mul_vec(&self, y: &[T]) -> Result<Vec<T>> {
        check_len("vector operand", self.n, y.len())?;
        Ok((0..self.n)
            .map(|i| (0..=i).map(|j| self.get(i, j) * y[j]).sum())
            .collect())
    }

    /// Solves `L v = rhs` by forward substitution.
    pub fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        check_len("right-hand side", self.n, rhs.len())?;
        let mut v = rhs.to_vec();
        for i in 0..self.n {
            let mut s = v[i];
            for j in 0..i {
                s -= self.offdiag[offdiag_index(i, j)] * v[j];
            }
            v[i] = s / self.diag[i];
        }
        Ok(v)
    }

    /// Solves `Lᵀ v = rhs` by back substitution.
    pub fn solve_transpose(&self, rhs: &[T]) -> Result<Vec<T>> {
        check_len("right-hand side", self.n, rhs.len())?;
        let mut v = rhs.to_vec();
        for i in (0..self.n).rev() {
            let mut s = v[i];
            for k in i + 1..self.n {
                s -= self.offdiag[offdiag_index(k, i)] * v[k];
            }
            v[i] = s / self.diag[i];
        }
        Ok(v)
    }

    /// Product `self * other`, again lower triangular with positive diagonal.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_len("triangular product", self.n, other.n)?;
        let n = self.n;
        let diag = (0..n).map(|i| self.diag[i] * other.diag[i]).collect();
        let mut offdiag = Vec::with_capacity(offdiag_len(n));
        for i in 1..n {
            for j in 0..i {
                offdiag.push((j..=i).map(|k| self.get(i, k) * other.get(k, j)).sum());
            }
        }
        Self::new(diag, offdiag)
    }

    /// Explicit inverse as a dense lower-triangular matrix, one forward
    /// substitution per column.
    pub fn inverse_dense(&self) -> Matrix<T> {
        let n = self.n;
        let mut x = Matrix::zeros(n, n);
        for col in 0..n {
            for i in col..n {
                let mut s = if i == col { T::one() } else { T::zero() };
                for j in col..i {
                    s -= self.offdiag[offdiag_index(i, j)] * x[(j, col)];
                }
                x[(i, col)] = s / self.diag[i];
            }
        }
        x
    }

    /// `log det L = Σ log L_jj`.
    pub fn log_det(&self) -> T {
        self.diag.iter().map(|d| d.ln()).sum()
    }

    /// Precision matrix `L Lᵀ`.
    pub fn precision(&self) -> Matrix<T> {
        let n = self.n;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s: T = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                p[(i, j)] = s;
                p[(j, i)] = s;
            }
        }
        p
    }

    pub fn covariance(&self) -> SymmetricPD<T> {
        covariance_from_whitener(self)
    }

    pub fn cast<U: Scalar>(&self) -> LowerTriangular<U> {
        let conv = |v: &T| U::lit(v.as_f64());
        LowerTriangular {
            n: self.n,
            diag: self.diag.iter().map(conv).collect(),
            offdiag: self.offdiag.iter().map(conv).collect(),
        }
    }
}

/// Symmetric positive definite matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricPD<T> {
    entries: Matrix<T>,
}

impl<T: Scalar> SymmetricPD<T> {
    /// Checks squareness, symmetry (relative to the largest entry) and positive
    /// definiteness. The stored matrix is exactly symmetrized.
    pub fn new(entries: Matrix<T>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::DimensionMismatch {
                what: "square matrix",
                expected: entries.rows(),
                found: entries.cols(),
            });
        }
        let n = entries.rows();
        let tol = T::lit(SYMMETRY_TOLERANCE).max(T::epsilon() * T::lit(4.0)) * entries.max_abs();
        let mut sym = entries;
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (sym[(i, j)], sym[(j, i)]);
                if (a - b).abs() > tol {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
                let m = (a + b) * T::lit(0.5);
                sym[(i, j)] = m;
                sym[(j, i)] = m;
            }
        }
        cholesky_dense(&sym)?;
        Ok(Self { entries: sym })
    }

    /// Wraps a matrix known to be symmetric PD by construction.
    pub(crate) fn new_unchecked(entries: Matrix<T>) -> Self {
        Self { entries }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: Matrix::identity(n),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    #[inline]
    pub fn entries(&self) -> &Matrix<T> {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[(i, j)]
    }

    pub fn cholesky(&self) -> Result<LowerTriangular<T>> {
        cholesky(self)
    }

    /// Inverse, computed from the Cholesky factor by triangular solves.
    pub fn inverse(&self) -> Result<Self> {
        let g = self.cholesky()?;
        Ok(gram_of_inverse(&g))
    }

    /// The whitener `chol(Σ⁻¹)` associated with this covariance.
    pub fn precision_whitener(&self) -> Result<LowerTriangular<T>> {
        self.inverse()?.cholesky()
    }

    pub fn log_det(&self) -> Result<T> {
        Ok(T::lit(2.0) * self.cholesky()?.log_det())
    }
}

/// `Xᵀ X` where `X = L⁻¹`, i.e. `(L Lᵀ)⁻¹`. Symmetric by construction.
fn gram_of_inverse<T: Scalar>(l: &LowerTriangular<T>) -> SymmetricPD<T> {
    let n = l.dim();
    let x = l.inverse_dense();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            // X is lower triangular: rows k >= max(i, j) contribute.
            let s: T = (j..n).map(|k| x[(k, i)] * x[(k, j)]).sum();
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    SymmetricPD::new_unchecked(out)
}

/// Cholesky factor `L` with `L Lᵀ = a`.
pub fn cholesky<T: Scalar>(a: &SymmetricPD<T>) -> Result<LowerTriangular<T>> {
    cholesky_dense(a.entries())
}

/// Cholesky factorization of a dense symmetric matrix; only the lower triangle is read.
///
/// Fails with [`Error::NotPositiveDefinite`] when a pivot does not exceed
/// `PIVOT_TOLERANCE` times the largest diagonal entry of the input.
pub fn cholesky_dense<T: Scalar>(a: &Matrix<T>) -> Result<LowerTriangular<T>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            what: "square matrix",
            expected: a.rows(),
            found: a.cols(),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::InvalidConfig("cannot factor an empty matrix".into()));
    }
    let max_diag = (0..n)
        .map(|i| a[(i, i)])
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    let threshold = T::lit(PIVOT_TOLERANCE) * max_diag.max(T::zero());

    let mut diag = vec![T::zero(); n];
    let mut offdiag = vec![T::zero(); offdiag_len(n)];
    for i in 0..n {
        for j in 0..i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= offdiag[offdiag_index(i, k)] * offdiag[offdiag_index(j, k)];
            }
            offdiag[offdiag_index(i, j)] = s / diag[j];
        }
        let mut s = a[(i, i)];
        for k in 0..i {
            let v = offdiag[offdiag_index(i, k)];
            s -= v * v;
        }
        if !(s > threshold) || !s.is_finite() {
            return Err(Error::NotPositiveDefinite {
                index: i,
                pivot: s.as_f64(),
            });
        }
        diag[i] = s.sqrt();
    }
    Ok(LowerTriangular { n, diag, offdiag })
}

/// `Lᵀ y`, the whitened outcome.
pub fn whiten_vector<T: Scalar>(l: &LowerTriangular<T>, y: &[T]) -> Result<Vec<T>> {
    l.transpose_mul(y)
}

/// `Σ̂ = (L Lᵀ)⁻¹`, via triangular solves.
pub fn covariance_from_whitener<T: Scalar>(l: &LowerTriangular<T>) -> SymmetricPD<T> {
    gram_of_inverse(l)
}

/// Forward substitution: returns `v` with `L v = rhs`.
pub fn solve_lower<T: Scalar>(l: &LowerTriangular<T>, rhs: &[T]) -> Result<Vec<T>> {
    l.solve(rhs)
}
