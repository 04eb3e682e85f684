//! Dense linear algebra kernels shared by every analysis.
//!
//! Matrices are stored row-major in a single contiguous buffer. Reduced
//! admittance matrices are dense anyway, so no sparse path is provided.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative pivot threshold below which a factorization is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-13;

/// Smallest singular value treated as nonzero by [`condition_number_2`].
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular (pivot {pivot:.3e} at column {column}, threshold {threshold:.3e})")]
    SingularMatrix {
        column: usize,
        pivot: f64,
        threshold: f64,
    },
    #[error("interior block is singular: {0}")]
    SingularBlock(Box<LinalgError>),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Field operations needed by the dense kernels.
pub trait Scalar:
    Copy
    + PartialEq
    + fmt::Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn modulus(self) -> f64;
    fn conjugate(self) -> Self;
    fn finite(self) -> bool;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn conjugate(self) -> Self {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn conjugate(self) -> Self {
        self.conj()
    }
    fn finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Dense row-major matrix.
///
/// Zero-sized matrices are permitted so that "nothing eliminated" and
/// "nothing retained" results can be represented without special cases.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type ComplexDense = Dense<Complex64>;
pub type RealDense = Dense<f64>;

impl<T: Scalar> fmt::Debug for Dense<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Dense {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Dense<T> {
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

    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(entries: &[T]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn column(values: &[T]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.modulus()))
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.modulus()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
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

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>, LinalgError> {
        if self.cols != x.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect())
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::DimensionMismatch("subtraction".into()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::DimensionMismatch("addition".into()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    /// Extracts the block `self[rows × cols]`.
    pub fn select(&self, rows: &IndexSet, cols: &IndexSet) -> Self {
        Self::from_fn(rows.len(), cols.len(), |r, c| {
            self[(rows.0[r], cols.0[c])]
        })
    }

    /// Adds `block` into `self` at offset (`r0`, `c0`).
    pub fn add_block(&mut self, r0: usize, c0: usize, block: &Self) {
        for r in 0..block.rows {
            for c in 0..block.cols {
                let v = block[(r, c)];
                self[(r0 + r, c0 + c)] += v;
            }
        }
    }

    /// Largest entrywise deviation from symmetry, `max |a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in r + 1..self.cols.min(self.rows) {
                worst = worst.max((self[(r, c)] - self[(c, r)]).modulus());
            }
        }
        worst
    }

    /// Largest entrywise deviation between two equally shaped matrices.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).modulus()))
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<T> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl ComplexDense {
    pub fn real_part(&self) -> RealDense {
        Dense::from_fn(self.rows, self.cols, |r, c| self[(r, c)].re)
    }

    pub fn imag_part(&self) -> RealDense {
        Dense::from_fn(self.rows, self.cols, |r, c| self[(r, c)].im)
    }

    pub fn from_real(m: &RealDense) -> Self {
        Dense::from_fn(m.rows, m.cols, |r, c| Complex64::new(m[(r, c)], 0.0))
    }
}

impl<T> Index<(usize, usize)> for Dense<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Dense<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Strictly increasing list of flat (node, phase) indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self, LinalgError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LinalgError::InvalidIndexSet(
                "indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(LinalgError::InvalidIndexSet(format!(
                    "index {last} out of range for dimension {dim}"
                )));
            }
        }
        Ok(Self(indices))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn range(start: usize, end: usize) -> Self {
        Self((start..end).collect())
    }

    /// All indices in `0..dim` not contained in `self`.
    pub fn complement(&self, dim: usize) -> Self {
        let mut out = Vec::with_capacity(dim.saturating_sub(self.0.len()));
        let mut it = self.0.iter().peekable();
        for i in 0..dim {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        Self(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }
}

/// LU factorization with partial pivoting, `P·A = L·U`.
#[derive(Debug, Clone)]
pub struct LuFactors<T: Scalar> {
    lu: Dense<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> LuFactors<T> {
    pub fn factor(a: &Dense<T>) -> Result<Self, LinalgError> {
        Self::factor_owned(a.clone())
    }

    /// Factors in place, consuming the matrix.
    pub fn factor_owned(mut a: Dense<T>) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare {
                rows: a.rows,
                cols: a.cols,
            });
        }
        if !a.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let n = a.rows;
        let mut perm: Vec<usize> = (0..n).collect();

        // Threshold relative to the largest candidate pivot of the input.
        let scale = (0..n)
            .flat_map(|c| (0..n).map(move |r| (r, c)))
            .fold(0.0f64, |m, (r, c)| m.max(a[(r, c)].modulus()));
        let threshold = PIVOT_TOLERANCE * scale;

        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].modulus();
            for i in k + 1..n {
                let v = a[(i, k)].modulus();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= threshold || best == 0.0 {
                return Err(LinalgError::SingularMatrix {
                    column: k,
                    pivot: best,
                    threshold,
                });
            }
            if p != k {
                perm.swap(p, k);
                let (lo, hi) = a.data.split_at_mut(p * n);
                lo[k * n..(k + 1) * n].swap_with_slice(&mut hi[..n]);
            }
            let (top, bottom) = a.data.split_at_mut((k + 1) * n);
            let pivot_row = &top[k * n..(k + 1) * n];
            let d = pivot_row[k];
            let tail = &pivot_row[k + 1..];
            for row in bottom.chunks_exact_mut(n) {
                let l = row[k] / d;
                row[k] = l;
                if l != T::zero() {
                    for (x, &u) in row[k + 1..].iter_mut().zip(tail) {
                        *x -= l * u;
                    }
                }
            }
        }
        Ok(Self { lu: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) -> Result<(), LinalgError> {
        let n = self.dim();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "right-hand side of length {} for a {n}x{n} system",
                b.len()
            )));
        }
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let mut acc = x[i];
            for (j, &l) in row[..i].iter().enumerate() {
                acc -= l * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let mut acc = x[i];
            for (j, &u) in row.iter().enumerate().skip(i + 1) {
                acc -= u * x[j];
            }
            x[i] = acc / row[i];
        }
        b.copy_from_slice(&x);
        Ok(())
    }

    pub fn solve_vec(&self, b: &[T]) -> Result<Vec<T>, LinalgError> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }

    /// Solves `A X = B` for a matrix right-hand side.
    pub fn solve(&self, b: &Dense<T>) -> Result<Dense<T>, LinalgError> {
        let n = self.dim();
        if b.rows != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "right-hand side with {} rows for a {n}x{n} system",
                b.rows
            )));
        }
        let m = b.cols;
        // Row-oriented substitution on the whole block keeps the inner loops contiguous.
        let mut x = Dense::zeros(n, m);
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(i).copy_from_slice(b.row(p));
        }
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for (j, &l) in self.lu.row(i)[..i].iter().enumerate() {
                if l != T::zero() {
                    for (t, &s) in xi.iter_mut().zip(&done[j * m..(j + 1) * m]) {
                        *t -= l * s;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = x.data.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            let row = self.lu.row(i);
            for (off, &u) in row[i + 1..].iter().enumerate() {
                if u != T::zero() {
                    let j = off;
                    for (t, &s) in xi.iter_mut().zip(&tail[j * m..(j + 1) * m]) {
                        *t -= u * s;
                    }
                }
            }
            let d = row[i];
            for t in xi.iter_mut() {
                *t = *t / d;
            }
        }
        Ok(x)
    }
}

/// Solves `A X = B` by partial-pivoting LU.
pub fn lu_solve<T: Scalar>(a: &Dense<T>, b: &Dense<T>) -> Result<Dense<T>, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "A is {}x{}, B has {} rows",
            a.rows, a.cols, b.rows
        )));
    }
    LuFactors::factor(a)?.solve(b)
}

/// Schur complement together with the solved interior block.
#[derive(Debug, Clone)]
pub struct SchurParts<T: Scalar> {
    /// `M[keep×keep] − M[keep×drop]·M[drop×drop]⁻¹·M[drop×keep]`
    pub complement: Dense<T>,
    /// `M[drop×drop]⁻¹·M[drop×keep]`
    pub interior_solve: Dense<T>,
}

fn check_partition(dim: usize, keep: &IndexSet, drop: &IndexSet) -> Result<(), LinalgError> {
    if keep.len() + drop.len() != dim {
        return Err(LinalgError::InvalidIndexSet(format!(
            "keep ({}) and drop ({}) do not partition {dim} indices",
            keep.len(),
            drop.len()
        )));
    }
    let mut seen = vec![false; dim];
    for i in keep.iter().chain(drop.iter()) {
        if i >= dim || std::mem::replace(&mut seen[i], true) {
            return Err(LinalgError::InvalidIndexSet(format!(
                "index {i} repeated or out of range"
            )));
        }
    }
    Ok(())
}

/// Schur complement of `M[drop×drop]` in `M`, also returning the interior solve.
pub fn schur_parts<T: Scalar>(
    m: &Dense<T>,
    keep: &IndexSet,
    drop: &IndexSet,
) -> Result<SchurParts<T>, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            rows: m.rows,
            cols: m.cols,
        });
    }
    check_partition(m.rows, keep, drop)?;
    let m_kk = m.select(keep, keep);
    if drop.is_empty() {
        return Ok(SchurParts {
            complement: m_kk,
            interior_solve: Dense::zeros(0, keep.len()),
        });
    }
    let m_dd = m.select(drop, drop);
    let m_dk = m.select(drop, keep);
    let m_kd = m.select(keep, drop);
    let interior_solve = LuFactors::factor_owned(m_dd)
        .and_then(|lu| lu.solve(&m_dk))
        .map_err(|e| LinalgError::SingularBlock(Box::new(e)))?;
    let correction = m_kd.matmul(&interior_solve)?;
    Ok(SchurParts {
        complement: m_kk.sub(&correction)?,
        interior_solve,
    })
}

/// `M[keep×keep] − M[keep×drop]·M[drop×drop]⁻¹·M[drop×keep]`.
///
/// An empty `keep` yields the 0×0 matrix.
pub fn schur_complement<T: Scalar>(
    m: &Dense<T>,
    keep: &IndexSet,
    drop: &IndexSet,
) -> Result<Dense<T>, LinalgError> {
    schur_parts(m, keep, drop).map(|p| p.complement)
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar + nalgebra::ComplexField<RealField = f64>>(a: &Dense<T>) -> Result<Vec<f64>, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let sv = a.to_nalgebra().singular_values();
    let mut v: Vec<f64> = sv.iter().copied().collect();
    v.sort_by(|x, y| y.total_cmp(x));
    Ok(v)
}

/// Spectral condition number `σ_max / σ_min`; `+∞` when `σ_min` underflows.
pub fn condition_number_2<T: Scalar + nalgebra::ComplexField<RealField = f64>>(a: &Dense<T>) -> Result<f64, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let sv = singular_values(a)?;
    let (Some(&max), Some(&min)) = (sv.first(), sv.last()) else {
        return Ok(1.0);
    };
    if min < SINGULAR_VALUE_FLOOR {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_complex(rng: &mut ChaCha8Rng, n: usize, m: usize) -> ComplexDense {
        Dense::from_fn(n, m, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    /// Diagonally dominant, hence comfortably invertible.
    fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> ComplexDense {
        let mut a = random_complex(rng, n, n);
        for i in 0..n {
            a[(i, i)] += c(2.0 * n as f64, 0.5);
        }
        a
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let b = Dense::column(&[c(1.0, 2.0), c(-3.0, 0.5), c(0.0, 1.0)]);
        let x = lu_solve(&ComplexDense::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn diagonal_solve() {
        let a = RealDense::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let b = RealDense::column(&[2.0, 8.0]);
        let x = lu_solve(&a, &b).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn round_trip_recovers_known_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = well_conditioned(&mut rng, 12);
        let x0 = random_complex(&mut rng, 12, 3);
        let b = a.matmul(&x0).unwrap();
        let x = lu_solve(&a, &b).unwrap();
        assert!(x.max_abs_diff(&x0) < 1e-10);
        let resid = a.matmul(&x).unwrap().sub(&b).unwrap();
        assert!(resid.norm_inf() <= 1e-12 * b.norm_inf());
    }

    #[test]
    fn solve_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = well_conditioned(&mut rng, 10);
        let b = random_complex(&mut rng, 10, 2);
        let x1 = lu_solve(&a, &b).unwrap();
        let x2 = lu_solve(&a, &b).unwrap();
        assert_eq!(x1.as_slice(), x2.as_slice());
    }

    #[test]
    fn vector_and_matrix_solves_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = well_conditioned(&mut rng, 9);
        let b = random_complex(&mut rng, 9, 1);
        let lu = LuFactors::factor(&a).unwrap();
        let xm = lu.solve(&b).unwrap();
        let xv = lu.solve_vec(b.as_slice()).unwrap();
        for (p, q) in xm.as_slice().iter().zip(&xv) {
            assert!((p - q).norm() < 1e-14);
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = RealDense::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let err = lu_solve(&a, &RealDense::column(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, LinalgError::SingularMatrix { column: 1, .. }));
    }

    #[test]
    fn nearly_singular_below_relative_threshold() {
        let a = RealDense::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-14]]).unwrap();
        assert!(LuFactors::factor(&a).is_err());
        let b = RealDense::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-12]]).unwrap();
        assert!(LuFactors::factor(&b).is_ok());
    }

    #[test]
    fn non_finite_input_rejected() {
        assert_eq!(
            RealDense::from_row_major(1, 2, vec![1.0, f64::NAN]).unwrap_err(),
            LinalgError::NonFinite
        );
    }

    #[test]
    fn schur_with_empty_drop_is_restriction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_complex(&mut rng, 4, 4);
        let keep = IndexSet::range(0, 4);
        let s = schur_complement(&m, &keep, &IndexSet::empty()).unwrap();
        assert_eq!(s, m);
    }

    #[test]
    fn schur_with_empty_keep_is_zero_sized() {
        let m = RealDense::identity(3);
        let s = schur_complement(&m, &IndexSet::empty(), &IndexSet::range(0, 3)).unwrap();
        assert_eq!((s.rows(), s.cols()), (0, 0));
    }

    #[test]
    fn scalar_schur_by_hand() {
        let m = RealDense::from_rows(&[vec![2.0, -1.0], vec![-1.0, 2.0]]).unwrap();
        let s = schur_complement(&m, &IndexSet::range(0, 1), &IndexSet::range(1, 2)).unwrap();
        assert_relative_eq!(s[(0, 0)], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn schur_partition_is_checked() {
        let m = RealDense::identity(3);
        let err = schur_complement(&m, &IndexSet::range(0, 1), &IndexSet::range(1, 2)).unwrap_err();
        assert!(matches!(err, LinalgError::InvalidIndexSet(_)));
    }

    #[test]
    fn schur_singular_block() {
        let m = RealDense::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let err = schur_complement(&m, &IndexSet::range(0, 1), &IndexSet::range(1, 2)).unwrap_err();
        assert!(matches!(err, LinalgError::SingularBlock(_)));
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> RealDense {
        let a = Dense::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut s = a.transpose().matmul(&a).unwrap();
        for i in 0..n {
            s[(i, i)] += 1.0;
        }
        s
    }

    #[test]
    fn sequential_elimination_equals_combined() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_spd(&mut rng, 9);
        // Eliminate {7, 8} first, then {5, 6} from the result.
        let first = schur_complement(&m, &IndexSet::range(0, 7), &IndexSet::range(7, 9)).unwrap();
        let second =
            schur_complement(&first, &IndexSet::range(0, 5), &IndexSet::range(5, 7)).unwrap();
        let combined = schur_complement(&m, &IndexSet::range(0, 5), &IndexSet::range(5, 9)).unwrap();
        assert!(second.max_abs_diff(&combined) < 1e-10);
    }

    #[test]
    fn index_set_validation_and_complement() {
        assert!(IndexSet::new(vec![0, 2, 2], 4).is_err());
        assert!(IndexSet::new(vec![0, 5], 4).is_err());
        let s = IndexSet::new(vec![1, 3], 5).unwrap();
        assert_eq!(s.complement(5).as_slice(), &[0, 2, 4]);
        assert!(s.contains(3) && !s.contains(2));
    }

    #[test]
    fn condition_number_examples() {
        assert_relative_eq!(condition_number_2(&RealDense::identity(4)).unwrap(), 1.0, epsilon = 1e-12);
        let d = RealDense::diagonal(&[10.0, 0.1]);
        assert_relative_eq!(condition_number_2(&d).unwrap(), 100.0, max_relative = 1e-12);
        let singular = RealDense::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(condition_number_2(&singular).unwrap() > 1e15);
    }

    #[test]
    fn condition_number_transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_complex(&mut rng, 8, 8);
        let k1 = condition_number_2(&a).unwrap();
        let k2 = condition_number_2(&a.transpose()).unwrap();
        assert_relative_eq!(k1, k2, max_relative = 1e-8);
    }

    #[test]
    fn condition_number_rejects_rectangular() {
        assert!(condition_number_2(&RealDense::zeros(2, 3)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy(n: usize) -> impl Strategy<Value = ComplexDense> {
            prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n).prop_map(move |v| {
                let mut m = Dense::from_fn(n, n, |r, col| c(v[r * n + col].0, v[r * n + col].1));
                for i in 0..n {
                    m[(i, i)] += c(n as f64, 0.0);
                }
                m
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn solve_inverts_product(a in matrix_strategy(6), x in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 6)) {
                let x: Vec<Complex64> = x.into_iter().map(|(r, i)| c(r, i)).collect();
                let b = a.matvec(&x).unwrap();
                let sol = LuFactors::factor(&a).unwrap().solve_vec(&b).unwrap();
                let scale = x.iter().fold(1e-300f64, |m, v| m.max(v.norm()));
                for (p, q) in sol.iter().zip(&x) {
                    prop_assert!((p - q).norm() <= 1e-9 * scale);
                }
            }

            #[test]
            fn condition_number_is_scale_invariant(a in matrix_strategy(5), re in 0.1f64..10.0, im in -10.0f64..10.0) {
                let k = condition_number_2(&a).unwrap();
                let ks = condition_number_2(&a.scale(c(re, im))).unwrap();
                prop_assert!((k - ks).abs() <= 1e-8 * k);
            }
        }
    }
}
