//! State-transition structure and observation densities.
//!
//! The state evolves as `x_t = c + T·x_{t-1} + R·η_t` with `η_t ~ N(0, Q)`.
//! Observations are drawn from `p(y_t | x_t)`, supplied through the
//! [`ObservationModel`] trait.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{cholesky, psd_factor, PdMatrix, SymMatrix};
use crate::rng::PortableRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Linear Gaussian state transition `(c, T, R, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTransition {
    c: DVector<f64>,
    t: DMatrix<f64>,
    r: DMatrix<f64>,
    q: SymMatrix,
    noise_cov: SymMatrix,
}

impl StateTransition {
    pub fn new(c: DVector<f64>, t: DMatrix<f64>, r: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = c.len();
        if d == 0 {
            return Err(Error::InvalidModel("state dimension must be positive".into()));
        }
        if t.shape() != (d, d) {
            return Err(dim_mismatch("T shape", (d, d), t.shape()));
        }
        if r.nrows() != d || r.ncols() == 0 {
            return Err(dim_mismatch("R rows", d, r.nrows()));
        }
        let m = r.ncols();
        if q.shape() != (m, m) {
            return Err(dim_mismatch("Q shape", (m, m), q.shape()));
        }
        let all_finite = c.iter().chain(t.iter()).chain(r.iter()).chain(q.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidModel("transition entries must be finite".into()));
        }
        if t.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidModel("T must contain at least one non-zero entry".into()));
        }
        let q = SymMatrix::new(q)?;
        let eig = q.eigenvalues();
        let largest = eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if eig.iter().any(|&v| v < -1e-10 * largest) {
            return Err(Error::InvalidModel("Q must be positive semi-definite".into()));
        }
        let noise_cov = SymMatrix::new(&r * q.matrix() * r.transpose())?;
        Ok(Self { c, t, r, q, noise_cov })
    }

    /// Scalar transition `x_t = c + T·x_{t-1} + η_t`, `η_t ~ N(0, Q)`.
    pub fn scalar(c: f64, t: f64, q: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, c),
            DMatrix::from_element(1, 1, t),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
        )
    }

    /// Static-parameter configuration: `c = 0`, `T = I`, `Q = 0`.
    pub fn static_state(dim: usize) -> Result<Self> {
        Self::new(
            DVector::zeros(dim),
            DMatrix::identity(dim, dim),
            DMatrix::identity(dim, dim),
            DMatrix::zeros(dim, dim),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.c.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.r.ncols()
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    /// `R·Q·Rᵀ`.
    pub fn noise_cov(&self) -> &SymMatrix {
        &self.noise_cov
    }
}

/// Observation density `p(y | x)` together with its derivatives in `x`.
///
/// Implementations for log-concave densities must return a positive
/// semi-definite [`neg_hessian`](ObservationModel::neg_hessian) everywhere.
pub trait ObservationModel: Send + Sync + fmt::Debug {
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;

    /// `log p(y | x)` including all normalizing constants.
    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64>;
    /// `∇ₓ log p(y | x)`.
    fn score(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// `−∇ₓ² log p(y | x)`.
    fn neg_hessian(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<SymMatrix>;
    /// Fisher information: the expectation over `y` of the negative Hessian.
    fn fisher(&self, x: &DVector<f64>) -> Result<SymMatrix>;
    /// Draws `y ~ p(· | x)`.
    fn sample(&self, x: &DVector<f64>, rng: &mut PortableRng) -> Result<DVector<f64>>;

    fn is_log_concave(&self) -> bool {
        true
    }

    fn as_gaussian(&self) -> Option<&GaussianObservation> {
        None
    }

    fn as_nonlinear_gaussian(&self) -> Option<&NonlinearGaussianObservation> {
        None
    }
}

fn check_state(x: &DVector<f64>, state_dim: usize) -> Result<()> {
    if x.len() != state_dim {
        return Err(dim_mismatch("state vector length", state_dim, x.len()));
    }
    Ok(())
}

fn check_obs(y: &DVector<f64>, obs_dim: usize) -> Result<()> {
    if y.len() != obs_dim {
        return Err(dim_mismatch("observation length", obs_dim, y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidObservation("observation must be finite".into()));
    }
    Ok(())
}

/// `y = d + Z·x + ε`, `ε ~ N(0, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianObservation {
    d: DVector<f64>,
    z: DMatrix<f64>,
    h: PdMatrix,
    info: SymMatrix,
}

impl GaussianObservation {
    pub fn new(d: DVector<f64>, z: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        let k = d.len();
        if k == 0 || z.nrows() != k || z.ncols() == 0 {
            return Err(dim_mismatch("Z shape (rows must match d)", k, z.shape()));
        }
        if h.shape() != (k, k) {
            return Err(dim_mismatch("H shape", (k, k), h.shape()));
        }
        if z.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidModel("Z must contain at least one non-zero entry".into()));
        }
        let h = cholesky(&SymMatrix::new(h)?)?;
        let info = SymMatrix::new(z.transpose() * h.solve(&z)?)?;
        Ok(Self { d, z, h, info })
    }

    pub fn scalar(d: f64, z: f64, h: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, d),
            DMatrix::from_element(1, 1, z),
            DMatrix::from_element(1, 1, h),
        )
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn h(&self) -> &PdMatrix {
        &self.h
    }

    fn residual(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_obs(y, self.obs_dim())?;
        check_state(x, self.state_dim())?;
        Ok(y - &self.d - &self.z * x)
    }
}

impl ObservationModel for GaussianObservation {
    fn obs_dim(&self) -> usize {
        self.d.len()
    }

    fn state_dim(&self) -> usize {
        self.z.ncols()
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let r = self.residual(y, x)?;
        Ok(-0.5 * (self.obs_dim() as f64 * LN_2PI + self.h.logdet() + self.h.quad_form(&r)?))
    }

    fn score(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residual(y, x)?;
        Ok(self.z.transpose() * self.h.solve_vec(&r)?)
    }

    fn neg_hessian(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<SymMatrix> {
        self.residual(y, x)?;
        Ok(self.info.clone())
    }

    fn fisher(&self, x: &DVector<f64>) -> Result<SymMatrix> {
        check_state(x, self.state_dim())?;
        Ok(self.info.clone())
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut PortableRng) -> Result<DVector<f64>> {
        check_state(x, self.state_dim())?;
        let eps = rng.normal_vector(self.obs_dim());
        Ok(&self.d + &self.z * x + self.h.factor() * eps)
    }

    fn as_gaussian(&self) -> Option<&GaussianObservation> {
        Some(self)
    }
}

/// Intercepts and loadings shared by the univariate-per-series count models.
#[derive(Debug, Clone, PartialEq)]
struct LinearIndex {
    d: DVector<f64>,
    z: DMatrix<f64>,
}

impl LinearIndex {
    fn new(d: DVector<f64>, z: DMatrix<f64>) -> Result<Self> {
        if d.is_empty() || z.nrows() != d.len() || z.ncols() == 0 {
            return Err(dim_mismatch("Z shape (rows must match d)", d.len(), z.shape()));
        }
        if d.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("intercepts and loadings must be finite".into()));
        }
        Ok(Self { d, z })
    }

    fn eta(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(x, self.z.ncols())?;
        Ok(&self.d + &self.z * x)
    }

    /// `Σᵢ wᵢ·zᵢzᵢᵀ`.
    fn weighted_gram(&self, w: &DVector<f64>) -> Result<SymMatrix> {
        let scaled = DMatrix::from_fn(self.z.nrows(), self.z.ncols(), |i, j| w[i] * self.z[(i, j)]);
        SymMatrix::new(self.z.transpose() * scaled)
    }
}

/// Independent `yᵢ ~ Poisson(exp(δᵢ + zᵢᵀx))` across series.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonObservation {
    index: LinearIndex,
}

impl PoissonObservation {
    pub fn new(d: DVector<f64>, z: DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            index: LinearIndex::new(d, z)?,
        })
    }

    pub fn scalar(d: f64, z: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, d), DMatrix::from_element(1, 1, z))
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.index.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.index.z
    }

    fn check_counts(&self, y: &DVector<f64>) -> Result<()> {
        check_obs(y, self.obs_dim())?;
        if let Some(bad) = y.iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
            return Err(Error::InvalidObservation(format!(
                "Poisson counts must be non-negative integers, got {bad}"
            )));
        }
        Ok(())
    }

    fn intensity(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.index.eta(x)?.map(f64::exp))
    }
}

impl ObservationModel for PoissonObservation {
    fn obs_dim(&self) -> usize {
        self.index.d.len()
    }

    fn state_dim(&self) -> usize {
        self.index.z.ncols()
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_counts(y)?;
        let eta = self.index.eta(x)?;
        Ok(y.iter()
            .zip(eta.iter())
            .map(|(&yi, &ei)| yi * ei - ei.exp() - libm::lgamma(yi + 1.0))
            .sum())
    }

    fn score(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_counts(y)?;
        Ok(self.z().transpose() * (y - self.intensity(x)?))
    }

    fn neg_hessian(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<SymMatrix> {
        self.check_counts(y)?;
        self.fisher(x)
    }

    fn fisher(&self, x: &DVector<f64>) -> Result<SymMatrix> {
        self.index.weighted_gram(&self.intensity(x)?)
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut PortableRng) -> Result<DVector<f64>> {
        let lambda = self.intensity(x)?;
        Ok(lambda.map(|l| rng.poisson(l) as f64))
    }
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eᵛ)` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Independent `yᵢ ~ Bernoulli(logistic(δᵢ + zᵢᵀx))` across series.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliObservation {
    index: LinearIndex,
}

impl BernoulliObservation {
    pub fn new(d: DVector<f64>, z: DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            index: LinearIndex::new(d, z)?,
        })
    }

    pub fn scalar(d: f64, z: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, d), DMatrix::from_element(1, 1, z))
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.index.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.index.z
    }

    fn check_binary(&self, y: &DVector<f64>) -> Result<()> {
        check_obs(y, self.obs_dim())?;
        if let Some(bad) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::InvalidObservation(format!("Bernoulli data must be 0 or 1, got {bad}")));
        }
        Ok(())
    }

    fn probabilities(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.index.eta(x)?.map(logistic))
    }
}

impl ObservationModel for BernoulliObservation {
    fn obs_dim(&self) -> usize {
        self.index.d.len()
    }

    fn state_dim(&self) -> usize {
        self.index.z.ncols()
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_binary(y)?;
        let eta = self.index.eta(x)?;
        Ok(y.iter().zip(eta.iter()).map(|(&yi, &ei)| yi * ei - softplus(ei)).sum())
    }

    fn score(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_binary(y)?;
        Ok(self.z().transpose() * (y - self.probabilities(x)?))
    }

    fn neg_hessian(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<SymMatrix> {
        self.check_binary(y)?;
        self.fisher(x)
    }

    fn fisher(&self, x: &DVector<f64>) -> Result<SymMatrix> {
        let p = self.probabilities(x)?;
        self.index.weighted_gram(&p.map(|pi| pi * (1.0 - pi)))
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut PortableRng) -> Result<DVector<f64>> {
        let p = self.probabilities(x)?;
        Ok(p.map(|pi| if rng.bernoulli(pi) { 1.0 } else { 0.0 }))
    }
}

pub type StateMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// `y = d + Z(x) + ε`, `ε ~ N(0, H)` with a smooth user-supplied `Z(·)`.
///
/// The Jacobian of `Z` is supplied by the caller and checked against
/// central differences at the origin and at each unit vector. The realized
/// negative Hessian needs second derivatives of `Z`; these are taken by
/// central differences of the Jacobian.
#[derive(Clone)]
pub struct NonlinearGaussianObservation {
    d: DVector<f64>,
    map: StateMap,
    jacobian: JacobianMap,
    h: PdMatrix,
    state_dim: usize,
}

impl fmt::Debug for NonlinearGaussianObservation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearGaussianObservation")
            .field("d", &self.d)
            .field("h", &self.h)
            .field("state_dim", &self.state_dim)
            .finish_non_exhaustive()
    }
}

/// Relative agreement required between a supplied Jacobian and central differences.
pub const JACOBIAN_TOLERANCE: f64 = 1e-5;

impl NonlinearGaussianObservation {
    pub fn new(
        d: DVector<f64>,
        state_dim: usize,
        map: StateMap,
        jacobian: JacobianMap,
        h: DMatrix<f64>,
    ) -> Result<Self> {
        let k = d.len();
        if k == 0 || state_dim == 0 {
            return Err(Error::InvalidModel("dimensions must be positive".into()));
        }
        if h.shape() != (k, k) {
            return Err(dim_mismatch("H shape", (k, k), h.shape()));
        }
        let h = cholesky(&SymMatrix::new(h)?)?;
        let model = Self {
            d,
            map,
            jacobian,
            h,
            state_dim,
        };
        let mut probes = vec![DVector::zeros(state_dim)];
        probes.extend((0..state_dim).map(|i| DVector::from_fn(state_dim, |j, _| if i == j { 1.0 } else { 0.0 })));
        model.check_jacobian(&probes)?;
        Ok(model)
    }

    /// Verifies the supplied Jacobian against central differences of `Z(·)`.
    pub fn check_jacobian(&self, probes: &[DVector<f64>]) -> Result<()> {
        for x in probes {
            check_state(x, self.state_dim)?;
            let z = (self.map)(x);
            if z.len() != self.d.len() {
                return Err(dim_mismatch("Z(x) length", self.d.len(), z.len()));
            }
            let jac = (self.jacobian)(x);
            if jac.shape() != (self.d.len(), self.state_dim) {
                return Err(dim_mismatch("Jacobian shape", (self.d.len(), self.state_dim), jac.shape()));
            }
            let fd = central_difference(self.state_dim, x, |p| (self.map)(p));
            let err = (&jac - &fd).amax();
            if err > JACOBIAN_TOLERANCE * fd.amax().max(1.0) {
                return Err(Error::InvalidModel(format!(
                    "Jacobian disagrees with finite differences by {err:e} at x = {:?}",
                    x.as_slice()
                )));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn h(&self) -> &PdMatrix {
        &self.h
    }

    pub fn map_state(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(x, self.state_dim)?;
        Ok((self.map)(x))
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_state(x, self.state_dim)?;
        Ok((self.jacobian)(x))
    }

    fn residual(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_obs(y, self.obs_dim())?;
        Ok(y - &self.d - self.map_state(x)?)
    }
}

/// Central-difference Jacobian of `f` at `x`; columns index the state.
fn central_difference(n: usize, x: &DVector<f64>, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut up = x.clone();
        up[j] += h;
        let mut down = x.clone();
        down[j] -= h;
        cols.push((f(&up) - f(&down)) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

impl ObservationModel for NonlinearGaussianObservation {
    fn obs_dim(&self) -> usize {
        self.d.len()
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let r = self.residual(y, x)?;
        Ok(-0.5 * (self.obs_dim() as f64 * LN_2PI + self.h.logdet() + self.h.quad_form(&r)?))
    }

    fn score(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residual(y, x)?;
        Ok(self.jacobian(x)?.transpose() * self.h.solve_vec(&r)?)
    }

    fn neg_hessian(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<SymMatrix> {
        let r = self.residual(y, x)?;
        let w = self.h.solve_vec(&r)?;
        let gn = self.fisher(x)?;
        // −Σ_k w_k ∇²Z_k(x), with ∇²Z_k from differences of Jacobian rows
        let n = self.state_dim;
        let mut curvature = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let h = 1e-5 * x[j].abs().max(1.0);
            let mut up = x.clone();
            up[j] += h;
            let mut down = x.clone();
            down[j] -= h;
            let dj = ((self.jacobian)(&up) - (self.jacobian)(&down)) / (2.0 * h);
            let col = dj.transpose() * &w;
            curvature.set_column(j, &col);
        }
        SymMatrix::new(gn.matrix() - curvature)
    }

    /// `JᵀH⁻¹J`; the curvature term of `Z` has zero mean under `p(y|x)`.
    fn fisher(&self, x: &DVector<f64>) -> Result<SymMatrix> {
        let jac = self.jacobian(x)?;
        SymMatrix::new(jac.transpose() * self.h.solve(&jac)?)
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut PortableRng) -> Result<DVector<f64>> {
        let eps = rng.normal_vector(self.obs_dim());
        Ok(&self.d + self.map_state(x)? + self.h.factor() * eps)
    }

    fn is_log_concave(&self) -> bool {
        false
    }

    fn as_nonlinear_gaussian(&self) -> Option<&NonlinearGaussianObservation> {
        Some(self)
    }
}

/// Scalar Cauchy location density `y = d + zᵀx + ε`, `ε ~ Cauchy(0, 1)`.
///
/// Not log-concave: the realized negative Hessian turns negative for
/// residuals larger than one, while the Fisher information `zzᵀ/2` stays
/// positive semi-definite. Exists to exercise the diagnostics on a
/// non-concave density.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyObservation {
    d: f64,
    z: DVector<f64>,
}

impl CauchyObservation {
    pub fn new(d: f64, z: DVector<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::InvalidModel("loading must be non-empty".into()));
        }
        Ok(Self { d, z })
    }

    fn residual(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        check_obs(y, 1)?;
        check_state(x, self.z.len())?;
        Ok(y[0] - self.d - self.z.dot(x))
    }
}

impl ObservationModel for CauchyObservation {
    fn obs_dim(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        self.z.len()
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let r = self.residual(y, x)?;
        Ok(-PI.ln() - (r * r).ln_1p())
    }

    fn score(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residual(y, x)?;
        Ok(&self.z * (2.0 * r / (1.0 + r * r)))
    }

    fn neg_hessian(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<SymMatrix> {
        let r = self.residual(y, x)?;
        let s = 2.0 * (1.0 - r * r) / (1.0 + r * r).powi(2);
        SymMatrix::new(&self.z * self.z.transpose() * s)
    }

    fn fisher(&self, x: &DVector<f64>) -> Result<SymMatrix> {
        check_state(x, self.z.len())?;
        SymMatrix::new(&self.z * self.z.transpose() * 0.5)
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut PortableRng) -> Result<DVector<f64>> {
        check_state(x, self.z.len())?;
        Ok(DVector::from_element(1, self.d + self.z.dot(x) + rng.standard_cauchy()))
    }

    fn is_log_concave(&self) -> bool {
        false
    }
}

/// Plain-data description of a transition, editable entry by entry before
/// being validated into a [`StateTransition`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSpec {
    pub c: DVector<f64>,
    pub t: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl TransitionSpec {
    pub fn build(&self) -> Result<StateTransition> {
        StateTransition::new(self.c.clone(), self.t.clone(), self.r.clone(), self.q.clone())
    }
}

impl From<&StateTransition> for TransitionSpec {
    fn from(t: &StateTransition) -> Self {
        Self {
            c: t.c.clone(),
            t: t.t.clone(),
            r: t.r.clone(),
            q: t.q.matrix().clone(),
        }
    }
}

/// Plain-data description of one of the built-in observation densities.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationSpec {
    Gaussian {
        d: DVector<f64>,
        z: DMatrix<f64>,
        h: DMatrix<f64>,
    },
    Poisson {
        d: DVector<f64>,
        z: DMatrix<f64>,
    },
    Bernoulli {
        d: DVector<f64>,
        z: DMatrix<f64>,
    },
    /// Scalar Cauchy; `z` must have a single row.
    Cauchy {
        d: DVector<f64>,
        z: DMatrix<f64>,
    },
}

impl ObservationSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ObservationSpec::Gaussian { .. } => "gaussian",
            ObservationSpec::Poisson { .. } => "poisson",
            ObservationSpec::Bernoulli { .. } => "bernoulli",
            ObservationSpec::Cauchy { .. } => "cauchy",
        }
    }

    pub fn build(&self) -> Result<Box<dyn ObservationModel>> {
        Ok(match self {
            ObservationSpec::Gaussian { d, z, h } => Box::new(GaussianObservation::new(d.clone(), z.clone(), h.clone())?),
            ObservationSpec::Poisson { d, z } => Box::new(PoissonObservation::new(d.clone(), z.clone())?),
            ObservationSpec::Bernoulli { d, z } => Box::new(BernoulliObservation::new(d.clone(), z.clone())?),
            ObservationSpec::Cauchy { d, z } => {
                if d.len() != 1 || z.nrows() != 1 {
                    return Err(Error::InvalidModel("the Cauchy density is scalar: d and Z need one row".into()));
                }
                Box::new(CauchyObservation::new(d[0], z.row(0).transpose())?)
            }
        })
    }

    pub fn d_mut(&mut self) -> &mut DVector<f64> {
        match self {
            ObservationSpec::Gaussian { d, .. }
            | ObservationSpec::Poisson { d, .. }
            | ObservationSpec::Bernoulli { d, .. }
            | ObservationSpec::Cauchy { d, .. } => d,
        }
    }

    pub fn z_mut(&mut self) -> &mut DMatrix<f64> {
        match self {
            ObservationSpec::Gaussian { z, .. }
            | ObservationSpec::Poisson { z, .. }
            | ObservationSpec::Bernoulli { z, .. }
            | ObservationSpec::Cauchy { z, .. } => z,
        }
    }

    pub fn h_mut(&mut self) -> Option<&mut DMatrix<f64>> {
        match self {
            ObservationSpec::Gaussian { h, .. } => Some(h),
            _ => None,
        }
    }
}

/// A complete model description: transition plus observation density.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub transition: TransitionSpec,
    pub observation: ObservationSpec,
}

impl ModelSpec {
    pub fn build(&self) -> Result<(StateTransition, Box<dyn ObservationModel>)> {
        let trans = self.transition.build()?;
        let obs = self.observation.build()?;
        if obs.state_dim() != trans.state_dim() {
            return Err(dim_mismatch(
                "observation loadings vs state dimension",
                trans.state_dim(),
                obs.state_dim(),
            ));
        }
        Ok((trans, obs))
    }
}

/// Lower factor of `Q` for drawing `η ~ N(0, Q)`; zero columns where `Q` is singular.
pub fn noise_factor(trans: &StateTransition) -> DMatrix<f64> {
    psd_factor(trans.q())
}
