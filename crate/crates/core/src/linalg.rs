//! Dense symmetric and positive-definite linear algebra.
//!
//! Every uncertainty matrix in the filter is carried as a [`PdMatrix`],
//! i.e. together with its lower Cholesky factor, so that solves,
//! log-determinants and quadratic forms never need an explicit inverse.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_mismatch, Error, Result};

/// Relative pivot threshold for [`cholesky`].
pub const PIVOT_TOLERANCE: f64 = 1e-13;

/// Square matrix symmetrized as `(M + Mᵀ)/2` on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(dim_mismatch("symmetric matrix must be square", m.nrows(), m.ncols()));
        }
        if m.nrows() == 0 {
            return Err(Error::DimensionMismatch("symmetric matrix must be non-empty".into()));
        }
        Ok(Self(symmetrize(&m)))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Scalar (1×1) matrix.
    pub fn scalar(v: f64) -> Self {
        Self(DMatrix::from_element(1, 1, v))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(&self.0 * s)
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(dim_mismatch("matrix sum", self.dim(), other.dim()));
        }
        Ok(Self(&self.0 + &other.0))
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(dim_mismatch("matrix difference", self.dim(), other.dim()));
        }
        Ok(Self(&self.0 - &other.0))
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.0.clone().symmetric_eigen().eigenvalues
    }

    /// Smallest eigenvalue ≥ `-tol · max(1, largest |eigenvalue|)`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let eig = self.eigenvalues();
        let scale = eig.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        eig.iter().all(|&v| v >= -tol * scale)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Symmetric positive-definite matrix stored with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PdMatrix {
    sym: SymMatrix,
    factor: DMatrix<f64>,
}

impl PdMatrix {
    pub fn dim(&self) -> usize {
        self.sym.dim()
    }

    pub fn sym(&self) -> &SymMatrix {
        &self.sym
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.sym.matrix()
    }

    /// Lower-triangular `L` with `L·Lᵀ` equal to the matrix.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn identity(n: usize) -> Self {
        Self {
            sym: SymMatrix::identity(n),
            factor: DMatrix::identity(n, n),
        }
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.dim() {
            return Err(dim_mismatch("solve right-hand side rows", self.dim(), rhs.nrows()));
        }
        let mut x = rhs.clone();
        forward_substitute(&self.factor, &mut x);
        backward_substitute_transposed(&self.factor, &mut x);
        Ok(x)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.dim() {
            return Err(dim_mismatch("solve right-hand side length", self.dim(), rhs.len()));
        }
        let mut x = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        forward_substitute(&self.factor, &mut x);
        backward_substitute_transposed(&self.factor, &mut x);
        Ok(DVector::from_column_slice(x.as_slice()))
    }

    /// `L⁻¹·rhs`.
    pub fn whiten(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.dim() {
            return Err(dim_mismatch("whiten rows", self.dim(), rhs.nrows()));
        }
        let mut x = rhs.clone();
        forward_substitute(&self.factor, &mut x);
        Ok(x)
    }

    /// `vᵀ·M⁻¹·v`, computed as `‖L⁻¹v‖²`.
    pub fn quad_form(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(dim_mismatch("quadratic form length", self.dim(), v.len()));
        }
        let mut x = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        forward_substitute(&self.factor, &mut x);
        Ok(x.norm_squared())
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Explicit inverse. Only meant for validation code.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
            .expect("identity has matching dimension")
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization `m = L·Lᵀ`.
///
/// Fails with [`Error::NotPositiveDefinite`] at the first pivot that is
/// `≤ 1e-13 ×` the largest diagonal entry.
pub fn cholesky(m: &SymMatrix) -> Result<PdMatrix> {
    let a = m.matrix();
    let n = m.dim();
    let max_diag = a.diagonal().iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return Err(Error::NotPositiveDefinite { pivot: 0 });
    }
    let threshold = PIVOT_TOLERANCE * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > threshold) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(PdMatrix {
        sym: m.clone(),
        factor: l,
    })
}

/// Convenience: symmetrize a raw matrix and factorize it.
pub fn pd_from(m: DMatrix<f64>) -> Result<PdMatrix> {
    cholesky(&SymMatrix::new(m)?)
}

pub fn solve_pd(m: &PdMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.solve(rhs)
}

pub fn logdet_pd(m: &PdMatrix) -> f64 {
    m.logdet()
}

/// Lower factor `F` with `F·Fᵀ = m` for a positive *semi*-definite `m`.
///
/// Columns whose pivot drops to (relative) zero are left zero, so a zero
/// matrix yields a zero factor.
pub fn psd_factor(m: &SymMatrix) -> DMatrix<f64> {
    let a = m.matrix();
    let n = m.dim();
    let scale = a.diagonal().iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    let threshold = 1e-14 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot <= threshold {
            continue;
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    l
}

fn check_lemma_dims(a: &PdMatrix, b: &PdMatrix, c: &DMatrix<f64>) -> Result<()> {
    if c.nrows() != b.dim() || c.ncols() != a.dim() {
        return Err(dim_mismatch(
            "C must be (dim B) x (dim A)",
            (b.dim(), a.dim()),
            (c.nrows(), c.ncols()),
        ));
    }
    Ok(())
}

/// Pieces shared by both lemmas: `A⁻¹Cᵀ` and the factorized `B + C·A⁻¹·Cᵀ`.
fn lemma_parts(a: &PdMatrix, b: &PdMatrix, c: &DMatrix<f64>) -> Result<(DMatrix<f64>, PdMatrix)> {
    check_lemma_dims(a, b, c)?;
    let a_inv_ct = a.solve(&c.transpose())?;
    let inner = SymMatrix::new(b.matrix() + c * &a_inv_ct)?;
    Ok((a_inv_ct, cholesky(&inner)?))
}

/// `(A + CᵀB⁻¹C)⁻¹`, evaluated as `A⁻¹ − A⁻¹Cᵀ(B + CA⁻¹Cᵀ)⁻¹CA⁻¹`.
///
/// Only the B-sized system `B + CA⁻¹Cᵀ` is factorized.
pub fn woodbury_inverse(a: &PdMatrix, b: &PdMatrix, c: &DMatrix<f64>) -> Result<SymMatrix> {
    let (a_inv_ct, inner) = lemma_parts(a, b, c)?;
    let a_inv = a.inverse();
    let correction = &a_inv_ct * inner.solve(&a_inv_ct.transpose())?;
    SymMatrix::new(a_inv - correction)
}

/// `(A + CᵀB⁻¹C)⁻¹CᵀB⁻¹`, evaluated as `A⁻¹Cᵀ(B + CA⁻¹Cᵀ)⁻¹`.
///
/// With `A = P⁻¹`, `B = H`, `C = Z` this is the Kalman gain.
pub fn gain_identity(a: &PdMatrix, b: &PdMatrix, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a_inv_ct, inner) = lemma_parts(a, b, c)?;
    Ok(inner.solve(&a_inv_ct.transpose())?.transpose())
}

/// `(P⁻¹ + J)⁻¹` for positive-definite `P` and symmetric `J`.
///
/// With `P = L·Lᵀ` this equals `L(I + LᵀJL)⁻¹Lᵀ`; the bracket is factorized
/// and the product assembled from triangular solves. A
/// [`Error::NotPositiveDefinite`] result means `P⁻¹ + J` is not positive
/// definite, which can only happen when `J` is indefinite.
pub fn information_update(p: &PdMatrix, info: &SymMatrix) -> Result<PdMatrix> {
    if info.dim() != p.dim() {
        return Err(dim_mismatch("information matrix", p.dim(), info.dim()));
    }
    let l = p.factor();
    let n = p.dim();
    let inner = SymMatrix::new(DMatrix::identity(n, n) + l.transpose() * info.matrix() * l)?;
    let inner = cholesky(&inner)?;
    let w = inner.whiten(&l.transpose())?;
    cholesky(&SymMatrix::new(w.transpose() * w)?)
}

/// Solves `L·X = B` in place for lower-triangular `L`.
fn forward_substitute(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for col in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, col)];
            }
            b[(i, col)] = s / l[(i, i)];
        }
    }
}

/// Solves `Lᵀ·X = B` in place for lower-triangular `L`.
fn backward_substitute_transposed(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for col in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = b[(i, col)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * b[(k, col)];
            }
            b[(i, col)] = s / l[(i, i)];
        }
    }
}
