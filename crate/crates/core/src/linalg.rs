//! Small dense linear algebra used by the aspect projection.
//!
//! Everything here works on `f64` and is sized for the problem at hand: bases
//! of at most a few dozen vectors living in an embedding space of a few
//! hundred dimensions. The hot training loops in [`crate::model`] call the
//! slice helpers ([`dot`], [`norm`], [`axpy`]) directly; the owned types
//! ([`DenseVector`], [`Basis`]) carry the finiteness and independence checks
//! for the public API.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual norm below which Gram-Schmidt declares a basis dependent.
pub const INDEPENDENCE_TOL: f64 = 1e-9;

/// Norm below which [`cosine`] treats a vector as zero.
pub const ZERO_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("basis has {count} vectors but the space only has {dim} dimensions")]
    TooManyVectors { count: usize, dim: usize },
    #[error("basis is empty")]
    EmptyBasis,
    #[error("degenerate basis: vector {index} has residual norm {residual:e} after orthogonalization")]
    DegenerateBasis { index: usize, residual: f64 },
    #[error("normal equations are singular (pivot {pivot} collapsed)")]
    SingularSystem { pivot: usize },
    #[error("ridge must be a finite non-negative number, got {0}")]
    InvalidRidge(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A fixed-length vector whose entries are all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = entries.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self(entries))
    }

    pub fn from_slice(entries: &[f64]) -> Result<Self> {
        Self::new(entries.to_vec())
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// The `index`-th standard basis vector of `R^len`.
    pub fn unit(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, alpha: f64) -> DenseVector {
        DenseVector(self.0.iter().map(|x| alpha * x).collect())
    }

    pub fn sub(&self, other: &DenseVector) -> DenseVector {
        DenseVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &DenseVector) -> DenseVector {
        DenseVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = LinalgError;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(value: DenseVector) -> Self {
        value.0
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

/// An ordered set of `m <= n` linearly independent vectors in `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    vectors: Vec<DenseVector>,
    dim: usize,
}

impl Basis {
    /// Builds a basis, rejecting empty, ragged, oversized, or dependent input.
    pub fn new(vectors: Vec<DenseVector>) -> Result<Self> {
        let dim = vectors.first().ok_or(LinalgError::EmptyBasis)?.len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
            return Err(LinalgError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        if vectors.len() > dim {
            return Err(LinalgError::TooManyVectors {
                count: vectors.len(),
                dim,
            });
        }
        orthonormalize(&vectors)?;
        Ok(Self { vectors, dim })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(
            rows.iter()
                .map(|r| DenseVector::from_slice(r))
                .collect::<Result<_>>()?,
        )
    }

    /// Number of vectors `m`.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Ambient dimension `n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[DenseVector] {
        &self.vectors
    }

    pub fn get(&self, index: usize) -> &DenseVector {
        &self.vectors[index]
    }

    /// `sum_i coeffs[i] * basis[i]`
    pub fn combine(&self, coeffs: &[f64]) -> DenseVector {
        assert_eq!(coeffs.len(), self.len());
        let mut out = vec![0.0; self.dim];
        for (c, v) in coeffs.iter().zip(&self.vectors) {
            axpy(*c, v.as_slice(), &mut out);
        }
        DenseVector(out)
    }
}

/// Orthonormal factor `Q` and upper-triangular `R` with `basis[i] = sum_{j<=i} R[j][i] Q[j]`.
#[derive(Debug, Clone)]
pub struct GramSchmidt {
    pub orthonormal: Vec<Vec<f64>>,
    /// Row-major `m x m`, upper triangular.
    pub r: Vec<Vec<f64>>,
}

/// Gram-Schmidt with per-step normalization, in the modified form
/// (coefficients taken against the running residual) plus one
/// re-orthogonalization sweep.
fn orthonormalize(vectors: &[DenseVector]) -> Result<GramSchmidt> {
    let m = vectors.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut r = vec![vec![0.0; m]; m];
    for (i, psi) in vectors.iter().enumerate() {
        let mut w = psi.as_slice().to_vec();
        for _ in 0..2 {
            for (j, qj) in q.iter().enumerate() {
                let c = dot(&w, qj);
                r[j][i] += c;
                axpy(-c, qj, &mut w);
            }
        }
        let residual = norm(&w);
        let scale = psi.norm().max(1.0);
        if residual < INDEPENDENCE_TOL * scale {
            return Err(LinalgError::DegenerateBasis { index: i, residual });
        }
        r[i][i] = residual;
        w.iter_mut().for_each(|x| *x /= residual);
        q.push(w);
    }
    Ok(GramSchmidt { orthonormal: q, r })
}

/// Orthonormal basis spanning the same subspace; output `i` depends only on inputs `0..=i`.
pub fn gram_schmidt(basis: &Basis) -> Result<Basis> {
    let gs = orthonormalize(&basis.vectors)?;
    Ok(Basis {
        vectors: gs.orthonormal.into_iter().map(DenseVector).collect(),
        dim: basis.dim,
    })
}

/// Gram-Schmidt returning both factors, for callers that need coefficients in the original basis.
pub fn gram_schmidt_factors(basis: &Basis) -> Result<GramSchmidt> {
    orthonormalize(&basis.vectors)
}

/// Orthogonal decomposition `u = projection + residual` against a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Coefficients with respect to the *original* (not orthonormalized) basis.
    pub coeffs: DenseVector,
    pub projection: DenseVector,
    pub residual: DenseVector,
}

/// Project `u` onto `span(basis)` via Gram-Schmidt and back-substitution through `R`.
pub fn project_onto_span(u: &DenseVector, basis: &Basis) -> Result<Projection> {
    check_dim(u, basis)?;
    let gs = orthonormalize(&basis.vectors)?;
    let m = basis.len();
    let tilde: Vec<f64> = gs.orthonormal.iter().map(|q| dot(u.as_slice(), q)).collect();
    let mut projection = vec![0.0; basis.dim];
    for (c, q) in tilde.iter().zip(&gs.orthonormal) {
        axpy(*c, q, &mut projection);
    }
    // R c = tilde
    let mut coeffs = vec![0.0; m];
    for i in (0..m).rev() {
        let tail: f64 = ((i + 1)..m).map(|j| gs.r[i][j] * coeffs[j]).sum();
        coeffs[i] = (tilde[i] - tail) / gs.r[i][i];
    }
    let projection = DenseVector(projection);
    let residual = u.sub(&projection);
    Ok(Projection {
        coeffs: DenseVector(coeffs),
        projection,
        residual,
    })
}

/// Same decomposition as [`project_onto_span`], computed through the normal equations.
pub fn project_via_normal_equations(u: &DenseVector, basis: &Basis) -> Result<Projection> {
    check_dim(u, basis)?;
    let coeffs = least_squares(basis.vectors(), u, 0.0)?;
    let projection = basis.combine(coeffs.as_slice());
    let residual = u.sub(&projection);
    Ok(Projection {
        coeffs,
        projection,
        residual,
    })
}

fn check_dim(u: &DenseVector, basis: &Basis) -> Result<()> {
    if u.len() != basis.dim {
        return Err(LinalgError::DimensionMismatch {
            expected: basis.dim,
            got: u.len(),
        });
    }
    Ok(())
}

/// `argmin_w ||X w - target||^2 + ridge ||w||^2` where `design` holds the columns of `X`.
pub fn least_squares(design: &[DenseVector], target: &DenseVector, ridge: f64) -> Result<DenseVector> {
    let columns: Vec<&[f64]> = design.iter().map(DenseVector::as_slice).collect();
    least_squares_slices(&columns, target.as_slice(), ridge).map(DenseVector)
}

/// Slice form of [`least_squares`], used on hot paths.
pub fn least_squares_slices(columns: &[&[f64]], target: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(LinalgError::InvalidRidge(ridge));
    }
    if let Some(bad) = columns.iter().find(|c| c.len() != target.len()) {
        return Err(LinalgError::DimensionMismatch {
            expected: target.len(),
            got: bad.len(),
        });
    }
    let p = columns.len();
    let gram = DMatrix::from_fn(p, p, |i, j| {
        dot(columns[i], columns[j]) + if i == j { ridge } else { 0.0 }
    });
    let rhs = DVector::from_iterator(p, columns.iter().map(|c| dot(c, target)));
    solve_spd(gram, rhs).map(|w| w.iter().copied().collect())
}

/// Cholesky solve with a relative pivot check so rank-deficient systems fail loudly.
pub(crate) fn solve_spd(gram: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let scale = gram.diagonal().iter().fold(0.0_f64, |acc, d| acc.max(d.abs()));
    let chol = gram
        .clone()
        .cholesky()
        .ok_or(LinalgError::SingularSystem { pivot: 0 })?;
    let l = chol.l_dirty();
    for i in 0..l.nrows() {
        let pivot = l[(i, i)] * l[(i, i)];
        if !(pivot > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            return Err(LinalgError::SingularSystem { pivot: i });
        }
    }
    Ok(chol.solve(&rhs))
}

/// Cosine similarity, defined as 0 when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM_TOL || nb < ZERO_NORM_TOL {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}
