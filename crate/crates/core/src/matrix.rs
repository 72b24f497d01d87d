//! Dense real matrices and the structural predicates used throughout the crate.
//!
//! `Mat` is a small row-major matrix type. Arithmetic is dimension-checked and
//! returns [`MatrixError`] instead of panicking. Eigenvalue and singular-value
//! computations are delegated to `nalgebra`; everything else (inversion, norms,
//! power iteration, sign predicates) lives here.

use std::fmt;
use std::ops::Index;

use nalgebra::{DMatrix, Schur};
use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Strict margin used by [`is_hurwitz`] when callers have no better value.
pub const DEFAULT_HURWITZ_TOL: f64 = 1e-9;
/// Relative-change tolerance for power iteration.
pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Slack admitted when a *computed* matrix is expected to be nonnegative.
pub const COMPUTED_NONNEG_SLACK: f64 = 1e-9;
/// Pivots smaller than this times the largest entry are treated as zero.
pub const SINGULAR_PIVOT_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("matrix dimensions must be positive (got {rows}x{cols})")]
    EmptyDimension { rows: usize, cols: usize },
    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {found}")]
    EntryCount {
        rows: usize,
        cols: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("ragged matrix literal: row {row} has {found} entries, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("matrix must be square (got {rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is singular (pivot {pivot:e} below threshold {threshold:e})")]
    Singular { pivot: f64, threshold: f64 },
    #[error("matrix is not Metzler")]
    NotMetzler,
    #[error("matrix is not Hurwitz")]
    NotHurwitz,
    #[error("spectral computation did not converge (best estimate {})", .0.value)]
    NoConvergence(SpectralResult),
}

pub type Result<T> = std::result::Result<T, MatrixError>;

/// Dense real matrix stored in row-major order. Entries are always finite.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MatrixError::EmptyDimension { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(MatrixError::EntryCount {
                rows,
                cols,
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite {
                row: k / cols,
                col: k % cols,
                value: data[k],
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows, rejecting ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(nrows * ncols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != ncols {
                return Err(MatrixError::Ragged {
                    row: i,
                    expected: ncols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(nrows, ncols, data)
    }

    /// Column vector `n x 1`.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// Row vector `1 x n`.
    pub fn row(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(1, 1, vec![value])
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// # Panics
    /// Panics if either dimension is zero or `value` is not finite.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        assert!(value.is_finite(), "matrix entries must be finite");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// # Panics
    /// Panics if either dimension is zero or `f` produces a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced an invalid matrix")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| f(self.get(i, j)))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(MatrixError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut data = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    data[i * rhs.cols + j] += a * rhs.get(k, j);
                }
            }
        }
        Mat::new(self.rows, rhs.cols, data)
    }

    fn zip_with(&self, rhs: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != rhs.shape() {
            return Err(MatrixError::DimensionMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Mat::new(self.rows, self.cols, data)
    }

    pub fn checked_add(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn checked_sub(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Entrywise (Schur) product.
    pub fn hadamard(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    /// `self * x` for a plain slice; used on hot simulation paths.
    pub(crate) fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{}{:?}", self.rows, self.cols, self.to_rows())
    }
}

impl fmt::Display for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, row) in self.data.chunks(self.cols).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "[")?;
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
            write!(f, "]")?;
        }
        write!(f, "]")
    }
}

// Matrix literals are nested arrays, row-major: [[-5,5,1],[6,-7,1],[2,1,-5]].
impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for row in self.data.chunks(self.cols) {
            seq.serialize_element(row)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Mat::from_rows(&rows).map_err(de::Error::custom)
    }
}

/// Matrix norms understood by the radius formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Maximum absolute column sum.
    OperatorOne,
    /// Largest singular value.
    OperatorTwo,
    /// Maximum absolute row sum.
    OperatorInf,
    /// Largest absolute entry; only meaningful for Schur-scaled perturbations.
    MaxAbsEntry,
}

impl NormKind {
    /// Whether the norm is an operator norm that is monotone on nonnegative matrices.
    pub fn is_monotone_operator(self) -> bool {
        !matches!(self, NormKind::MaxAbsEntry)
    }

    pub fn label(self) -> &'static str {
        match self {
            NormKind::OperatorOne => "one",
            NormKind::OperatorTwo => "two",
            NormKind::OperatorInf => "inf",
            NormKind::MaxAbsEntry => "max_abs",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "one" | "1" => Ok(NormKind::OperatorOne),
            "two" | "2" => Ok(NormKind::OperatorTwo),
            "inf" => Ok(NormKind::OperatorInf),
            "max_abs" => Ok(NormKind::MaxAbsEntry),
            other => Err(format!(
                "unknown norm '{other}' (expected one, two, inf or max_abs)"
            )),
        }
    }
}

/// Outcome of an eigenvalue-based computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralResult {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

fn require_square(m: &Mat) -> Result<usize> {
    if m.is_square() {
        Ok(m.rows)
    } else {
        Err(MatrixError::NonSquare {
            rows: m.rows,
            cols: m.cols,
        })
    }
}

/// Exact sign test: every entry `>= 0`.
pub fn is_nonnegative(m: &Mat) -> bool {
    m.data.iter().all(|&v| v >= 0.0)
}

/// Every off-diagonal entry is `>= 0`.
pub fn is_metzler(m: &Mat) -> Result<bool> {
    let n = require_square(m)?;
    Ok((0..n).all(|i| (0..n).all(|j| i == j || m.get(i, j) >= 0.0)))
}

/// Nonnegativity test for matrices produced by floating-point computation.
pub fn is_nonnegative_computed(m: &Mat) -> bool {
    m.data.iter().all(|&v| v >= -COMPUTED_NONNEG_SLACK)
}

/// Eigenvalues via a real Schur decomposition, with the relative backward
/// error `max|Q T Q' - M| / max(1, max|M|)` as residual.
fn schur_eigenvalues(m: &Mat, max_iter: usize) -> Option<(Vec<nalgebra::Complex<f64>>, f64)> {
    let dm = m.to_nalgebra();
    let schur = Schur::try_new(dm.clone(), f64::EPSILON, max_iter)?;
    let eig = schur.complex_eigenvalues();
    let (q, t) = schur.unpack();
    let residual = (&q * t * q.transpose() - &dm).amax() / dm.amax().max(1.0);
    Some((eig.iter().copied().collect(), residual))
}

/// Gershgorin bound on the spectral abscissa; reported when Schur fails.
fn gershgorin_abscissa(m: &Mat) -> f64 {
    (0..m.rows)
        .map(|i| {
            let off: f64 = (0..m.cols)
                .filter(|&j| j != i)
                .map(|j| m.get(i, j).abs())
                .sum();
            m.get(i, i) + off
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// All eigenvalues of a square matrix as `(re, im)` pairs.
pub fn eigenvalues(m: &Mat) -> Result<Vec<(f64, f64)>> {
    require_square(m)?;
    match schur_eigenvalues(m, DEFAULT_MAX_ITER) {
        Some((eig, _)) => Ok(eig.into_iter().map(|z| (z.re, z.im)).collect()),
        None => Err(MatrixError::NoConvergence(SpectralResult {
            value: gershgorin_abscissa(m),
            iterations: DEFAULT_MAX_ITER,
            converged: false,
            residual: f64::INFINITY,
        })),
    }
}

/// Largest real part over the eigenvalues of `m`.
pub fn spectral_abscissa(m: &Mat, tol: f64, max_iter: usize) -> Result<SpectralResult> {
    require_square(m)?;
    match schur_eigenvalues(m, max_iter) {
        Some((eig, residual)) => {
            let value = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            let result = SpectralResult {
                value,
                iterations: max_iter,
                converged: residual <= tol,
                residual,
            };
            if result.converged {
                Ok(result)
            } else {
                Err(MatrixError::NoConvergence(result))
            }
        }
        None => Err(MatrixError::NoConvergence(SpectralResult {
            value: gershgorin_abscissa(m),
            iterations: max_iter,
            converged: false,
            residual: f64::INFINITY,
        })),
    }
}

/// `spectral_abscissa(m) < -tol`.
pub fn is_hurwitz(m: &Mat, tol: f64) -> Result<bool> {
    let abscissa = spectral_abscissa(m, DEFAULT_SPECTRAL_TOL, DEFAULT_MAX_ITER)?;
    Ok(abscissa.value < -tol)
}

/// Positive vector `v` with `m v < 0` for a Metzler Hurwitz `m`, built as
/// `v = (-m)^{-1} 1`.
pub fn metzler_hurwitz_certificate(m: &Mat) -> Result<Mat> {
    if !is_metzler(m)? {
        return Err(MatrixError::NotMetzler);
    }
    let neg_inv = match inverse(&m.scale(-1.0)) {
        Ok(inv) => inv,
        Err(MatrixError::Singular { .. }) => return Err(MatrixError::NotHurwitz),
        Err(e) => return Err(e),
    };
    let v = neg_inv.matmul(&Mat::filled(m.rows, 1, 1.0))?;
    let mv = m.matmul(&v)?;
    if v.min_entry() > 0.0 && mv.max_entry() < 0.0 {
        Ok(v)
    } else {
        Err(MatrixError::NotHurwitz)
    }
}

/// Gauss-Jordan inversion with partial pivoting.
pub fn inverse(m: &Mat) -> Result<Mat> {
    let n = require_square(m)?;
    let threshold = SINGULAR_PIVOT_RATIO * m.max_abs();
    let width = 2 * n;
    let mut aug = vec![0.0; n * width];
    for i in 0..n {
        aug[i * width..i * width + n].copy_from_slice(&m.data[i * n..(i + 1) * n]);
        aug[i * width + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&a, &b| {
                aug[a * width + col]
                    .abs()
                    .total_cmp(&aug[b * width + col].abs())
            })
            .expect("non-empty pivot range");
        let pivot = aug[pivot_row * width + col];
        if pivot.abs() <= threshold {
            return Err(MatrixError::Singular {
                pivot: pivot.abs(),
                threshold,
            });
        }
        if pivot_row != col {
            for k in 0..width {
                aug.swap(col * width + k, pivot_row * width + k);
            }
        }
        for k in 0..width {
            aug[col * width + k] /= pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = aug[r * width + col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..width {
                aug[r * width + k] -= factor * aug[col * width + k];
            }
        }
    }
    let data = (0..n)
        .flat_map(|i| aug[i * width + n..(i + 1) * width].to_vec())
        .collect();
    Mat::new(n, n, data).map_err(|_| MatrixError::Singular {
        pivot: 0.0,
        threshold,
    })
}

pub fn singular_values(m: &Mat) -> Vec<f64> {
    let svd = m.to_nalgebra().svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn operator_norm(m: &Mat, kind: NormKind) -> f64 {
    match kind {
        NormKind::OperatorOne => (0..m.cols)
            .map(|j| (0..m.rows).map(|i| m.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormKind::OperatorInf => m
            .data
            .chunks(m.cols)
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        NormKind::OperatorTwo => singular_values(m).first().copied().unwrap_or(0.0),
        NormKind::MaxAbsEntry => m.max_abs(),
    }
}

/// Largest eigenvalue modulus.
///
/// Nonnegative matrices go through power iteration from the all-ones vector;
/// if that stalls (e.g. a periodic irreducible matrix) the dense eigenvalue
/// method takes over. Everything else uses the dense method directly.
pub fn spectral_radius(m: &Mat, tol: f64, max_iter: usize) -> Result<SpectralResult> {
    let n = require_square(m)?;
    if is_nonnegative(m) {
        if let Some(result) = power_iteration(m, n, tol, max_iter) {
            return Ok(result);
        }
    }
    match schur_eigenvalues(m, max_iter) {
        Some((eig, residual)) => {
            let value = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
            let result = SpectralResult {
                value,
                iterations: max_iter,
                converged: residual <= tol,
                residual,
            };
            if result.converged {
                Ok(result)
            } else {
                Err(MatrixError::NoConvergence(result))
            }
        }
        None => Err(MatrixError::NoConvergence(SpectralResult {
            value: operator_norm(m, NormKind::OperatorInf),
            iterations: max_iter,
            converged: false,
            residual: f64::INFINITY,
        })),
    }
}

fn power_iteration(m: &Mat, n: usize, tol: f64, max_iter: usize) -> Option<SpectralResult> {
    let mut x = vec![1.0; n];
    let mut y = vec![0.0; n];
    let mut estimate = f64::NAN;
    for iter in 1..=max_iter {
        m.mul_vec_into(&x, &mut y);
        let lambda = y.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if lambda == 0.0 {
            // Nilpotent on the start vector's Krylov space.
            return Some(SpectralResult {
                value: 0.0,
                iterations: iter,
                converged: true,
                residual: 0.0,
            });
        }
        let change = (lambda - estimate).abs() / lambda;
        estimate = lambda;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / lambda;
        }
        if change <= tol {
            return Some(SpectralResult {
                value: lambda,
                iterations: iter,
                converged: true,
                residual: change,
            });
        }
    }
    None
}

pub fn elementwise_abs(m: &Mat) -> Mat {
    m.map(f64::abs)
}

/// `a <= b` entrywise.
pub fn elementwise_leq(a: &Mat, b: &Mat) -> Result<bool> {
    if a.shape() != b.shape() {
        return Err(MatrixError::DimensionMismatch {
            op: "elementwise_leq",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.data.iter().zip(&b.data).all(|(x, y)| x <= y))
}
