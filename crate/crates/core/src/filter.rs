//! The Bellman filter.
//!
//! Each step predicts with the Kalman prediction equations, then updates
//! the level by maximizing
//!
//! ```text
//! log p(y_t | x) − ½ (x − x̂_{t|t−1})ᵀ P_{t|t−1}⁻¹ (x − x̂_{t|t−1})
//! ```
//!
//! and the uncertainty by `P_{t|t} = [P_{t|t−1}⁻¹ + J]⁻¹`, where `J` is the
//! Fisher information, the realized negative Hessian, or a blend of the two,
//! evaluated at the maximizer. Linear Gaussian observations take the
//! closed-form Kalman update; smooth nonlinear Gaussian observations take
//! Gauss–Newton steps (the iterated extended Kalman filter).

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{cholesky, information_update, PdMatrix, SymMatrix};
use crate::model::{GaussianObservation, NonlinearGaussianObservation, ObservationModel, StateTransition};

/// Which information matrix enters the uncertainty update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InformationMode {
    Fisher,
    Realized,
    /// `w·Fisher + (1 − w)·Realized`, `w ∈ [0, 1]`.
    Weighted(f64),
}

/// Inner optimizer for the level update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerOptimizer {
    /// Newton steps with Armijo backtracking.
    Newton,
    /// BFGS on the same objective; never factorizes the realized Hessian.
    QuasiNewton,
}

pub const DEFAULT_GRAD_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;
/// Slack in the sufficient-increase test, relative to `max(1, |f|)`, so that
/// steps whose predicted gain is below rounding noise are not rejected.
const ROUNDOFF_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub info_mode: InformationMode,
    pub optimizer: InnerOptimizer,
    /// Convergence requires `‖∇‖ ≤ grad_tol · max(1, |objective at the prediction|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub x0: DVector<f64>,
    pub p0: PdMatrix,
    /// Route linear Gaussian and nonlinear Gaussian models through the
    /// generic mode search instead of their closed-form/Gauss–Newton paths.
    pub force_newton: bool,
}

impl FilterConfig {
    pub fn new(x0: DVector<f64>, p0: PdMatrix) -> Self {
        Self {
            info_mode: InformationMode::Fisher,
            optimizer: InnerOptimizer::Newton,
            grad_tol: DEFAULT_GRAD_TOL,
            max_iter: DEFAULT_MAX_ITER,
            x0,
            p0,
            force_newton: false,
        }
    }

    pub fn with_info_mode(mut self, mode: InformationMode) -> Self {
        self.info_mode = mode;
        self
    }

    pub fn with_optimizer(mut self, optimizer: InnerOptimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_force_newton(mut self, force: bool) -> Self {
        self.force_newton = force;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let InformationMode::Weighted(w) = self.info_mode {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("information weight must lie in [0, 1], got {w}")));
            }
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if self.x0.len() != self.p0.dim() {
            return Err(dim_mismatch("x0 vs P0", self.p0.dim(), self.x0.len()));
        }
        Ok(())
    }
}

/// Result of one level/uncertainty update.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub x_filt: DVector<f64>,
    pub p_filt: PdMatrix,
    pub inner_iters: usize,
}

/// One summand of the filter's likelihood criterion, split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodTerm {
    /// `log p(y_t | x̂_{t|t})`.
    pub fit: f64,
    /// `½ log(det P_{t|t−1} / det P_{t|t}) + ½ (x̂_{t|t} − x̂_{t|t−1})ᵀ P_{t|t−1}⁻¹ (·)`.
    pub penalty: f64,
}

impl LikelihoodTerm {
    pub fn total(&self) -> f64 {
        self.fit - self.penalty
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    /// 1-based time index.
    pub t: usize,
    pub x_pred: DVector<f64>,
    pub p_pred: PdMatrix,
    pub x_filt: DVector<f64>,
    pub p_filt: PdMatrix,
    pub fit: f64,
    pub penalty: f64,
    pub ll_term: f64,
    pub inner_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub steps: Vec<FilterStep>,
    pub objective: f64,
}

/// `x̂ = c + T·x`, `P = T·P·Tᵀ + R·Q·Rᵀ`.
pub fn predict(x_prev: &DVector<f64>, p_prev: &PdMatrix, trans: &StateTransition) -> Result<(DVector<f64>, PdMatrix)> {
    if x_prev.len() != trans.state_dim() || p_prev.dim() != trans.state_dim() {
        return Err(dim_mismatch("state dimension", trans.state_dim(), (x_prev.len(), p_prev.dim())));
    }
    let t = trans.t();
    let x_pred = trans.c() + t * x_prev;
    let p = t * p_prev.matrix() * t.transpose() + trans.noise_cov().matrix();
    Ok((x_pred, cholesky(&SymMatrix::new(p)?)?))
}

/// The level-update objective and its derivatives.
struct ModeObjective<'a> {
    y: &'a DVector<f64>,
    x_pred: &'a DVector<f64>,
    p_pred: &'a PdMatrix,
    model: &'a dyn ObservationModel,
}

impl ModeObjective<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.model.log_density(self.y, x)? - 0.5 * self.p_pred.quad_form(&(x - self.x_pred))?)
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.model.score(self.y, x)? - self.p_pred.solve_vec(&(x - self.x_pred))?)
    }
}

fn check_update_dims(y: &DVector<f64>, x_pred: &DVector<f64>, p_pred: &PdMatrix, model: &dyn ObservationModel) -> Result<()> {
    if y.len() != model.obs_dim() {
        return Err(dim_mismatch("observation length", model.obs_dim(), y.len()));
    }
    if x_pred.len() != model.state_dim() || p_pred.dim() != model.state_dim() {
        return Err(dim_mismatch("state dimension", model.state_dim(), (x_pred.len(), p_pred.dim())));
    }
    Ok(())
}

/// Outcome of a backtracking search along an ascent direction.
enum LineSearch {
    Accepted { x: DVector<f64>, f: f64 },
    Failed,
}

fn backtrack(obj: &ModeObjective<'_>, x: &DVector<f64>, f: f64, g: &DVector<f64>, dir: &DVector<f64>) -> LineSearch {
    let slope = g.dot(dir);
    let slack = ROUNDOFF_SLACK * f.abs().max(1.0);
    let mut alpha = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let candidate = x + dir * alpha;
        if let Ok(fc) = obj.value(&candidate) {
            if fc.is_finite() && fc >= f + ARMIJO_C * alpha * slope - slack {
                return LineSearch::Accepted { x: candidate, f: fc };
            }
        }
        alpha *= 0.5;
    }
    LineSearch::Failed
}

fn stalled(x_old: &DVector<f64>, x_new: &DVector<f64>) -> bool {
    (x_new - x_old).norm() <= 1e-15 * (1.0 + x_old.norm())
}

/// Information matrix for the uncertainty update at `x`.
pub fn information(model: &dyn ObservationModel, y: &DVector<f64>, x: &DVector<f64>, mode: InformationMode) -> Result<SymMatrix> {
    match mode {
        InformationMode::Fisher => model.fisher(x),
        InformationMode::Realized => model.neg_hessian(y, x),
        InformationMode::Weighted(w) => model.fisher(x)?.scaled(w).add(&model.neg_hessian(y, x)?.scaled(1.0 - w)),
    }
}

/// Generic level update by numerical maximization, followed by the
/// information-form uncertainty update.
pub fn bellman_update(
    y: &DVector<f64>,
    x_pred: &DVector<f64>,
    p_pred: &PdMatrix,
    model: &dyn ObservationModel,
    cfg: &FilterConfig,
) -> Result<Update> {
    check_update_dims(y, x_pred, p_pred, model)?;
    let obj = ModeObjective { y, x_pred, p_pred, model };
    let (x_filt, inner_iters) = match cfg.optimizer {
        InnerOptimizer::Newton => newton_mode(&obj, cfg)?,
        InnerOptimizer::QuasiNewton => bfgs_mode(&obj, cfg)?,
    };
    let info = information(model, y, &x_filt, cfg.info_mode)?;
    let p_filt = information_update(p_pred, &info)?;
    Ok(Update {
        x_filt,
        p_filt,
        inner_iters,
    })
}

fn newton_mode(obj: &ModeObjective<'_>, cfg: &FilterConfig) -> Result<(DVector<f64>, usize)> {
    let mut x = obj.x_pred.clone();
    let mut f = obj.value(&x)?;
    let tol = cfg.grad_tol * f.abs().max(1.0);
    for iter in 0..cfg.max_iter {
        let g = obj.gradient(&x)?;
        if g.norm() <= tol {
            return Ok((x, iter));
        }
        let neg_hess = obj.model.neg_hessian(obj.y, &x)?;
        // Newton direction (P⁻¹ + N)⁻¹g; fall back to the prior metric P·g
        // where the objective is locally not concave
        let dir = match information_update(obj.p_pred, &neg_hess) {
            Ok(cov) => cov.matrix() * &g,
            Err(Error::NotPositiveDefinite { .. }) => obj.p_pred.matrix() * &g,
            Err(e) => return Err(e),
        };
        match backtrack(obj, &x, f, &g, &dir) {
            LineSearch::Accepted { x: next, f: fnext } => {
                let done = stalled(&x, &next);
                x = next;
                f = fnext;
                if done {
                    return Ok((x, iter + 1));
                }
            }
            LineSearch::Failed => {
                return Err(Error::NoConvergence {
                    iters: iter,
                    grad_norm: g.norm(),
                })
            }
        }
    }
    let g = obj.gradient(&x)?;
    if g.norm() <= tol {
        return Ok((x, cfg.max_iter));
    }
    Err(Error::NoConvergence {
        iters: cfg.max_iter,
        grad_norm: g.norm(),
    })
}

fn bfgs_mode(obj: &ModeObjective<'_>, cfg: &FilterConfig) -> Result<(DVector<f64>, usize)> {
    let n = obj.x_pred.len();
    let mut x = obj.x_pred.clone();
    let mut f = obj.value(&x)?;
    let tol = cfg.grad_tol * f.abs().max(1.0);
    // inverse curvature seeded from the closed-form Fisher information
    let mut hinv = match obj.model.fisher(&x).and_then(|info| information_update(obj.p_pred, &info)) {
        Ok(cov) => cov.matrix().clone(),
        Err(_) => obj.p_pred.matrix().clone(),
    };
    let mut g = obj.gradient(&x)?;
    for iter in 0..cfg.max_iter {
        if g.norm() <= tol {
            return Ok((x, iter));
        }
        let dir = &hinv * &g;
        let (next, fnext) = match backtrack(obj, &x, f, &g, &dir) {
            LineSearch::Accepted { x, f } => (x, f),
            LineSearch::Failed => {
                return Err(Error::NoConvergence {
                    iters: iter,
                    grad_norm: g.norm(),
                })
            }
        };
        let g_next = obj.gradient(&next)?;
        if stalled(&x, &next) {
            return Ok((next, iter + 1));
        }
        let s = &next - &x;
        let yv = &g - &g_next;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let left = DMatrix::identity(n, n) - &s * yv.transpose() * rho;
            hinv = &left * &hinv * left.transpose() + &s * s.transpose() * rho;
            hinv = (&hinv + hinv.transpose()) * 0.5;
        }
        x = next;
        f = fnext;
        g = g_next;
    }
    if g.norm() <= tol {
        return Ok((x, cfg.max_iter));
    }
    Err(Error::NoConvergence {
        iters: cfg.max_iter,
        grad_norm: g.norm(),
    })
}

/// Closed-form Kalman update: `K = P·Zᵀ(Z·P·Zᵀ + H)⁻¹`, `x = x̂ + K·v`,
/// `P = P̂ − K·Z·P̂`. Only the innovation covariance is factorized.
pub fn kalman_update(y: &DVector<f64>, x_pred: &DVector<f64>, p_pred: &PdMatrix, model: &GaussianObservation) -> Result<Update> {
    check_update_dims(y, x_pred, p_pred, model)?;
    let innovation = y - model.d() - model.z() * x_pred;
    let (x_filt, p_filt) = linearized_update(model.z(), model.h(), x_pred, p_pred, &innovation)?;
    Ok(Update {
        x_filt,
        p_filt,
        inner_iters: 0,
    })
}

/// Kalman update with observation matrix `z` and innovation `v`.
fn linearized_update(
    z: &DMatrix<f64>,
    h: &PdMatrix,
    x_pred: &DVector<f64>,
    p_pred: &PdMatrix,
    innovation: &DVector<f64>,
) -> Result<(DVector<f64>, PdMatrix)> {
    let p = p_pred.matrix();
    let zp = z * p;
    let s = cholesky(&SymMatrix::new(&zp * z.transpose() + h.matrix())?)?;
    let gain = s.solve(&zp)?.transpose();
    let x_filt = x_pred + &gain * innovation;
    let p_filt = cholesky(&SymMatrix::new(p - &gain * zp)?)?;
    Ok((x_filt, p_filt))
}

/// One Gauss–Newton step linearized at `x_lin`:
/// `x = x̂ + K(y − d − Z(x_lin) − J(x̂ − x_lin))` with `J` the Jacobian at `x_lin`.
///
/// Linearizing at the prediction gives the extended Kalman filter update.
pub fn gauss_newton_step(
    y: &DVector<f64>,
    x_lin: &DVector<f64>,
    x_pred: &DVector<f64>,
    p_pred: &PdMatrix,
    model: &NonlinearGaussianObservation,
) -> Result<(DVector<f64>, PdMatrix)> {
    check_update_dims(y, x_pred, p_pred, model)?;
    let jac = model.jacobian(x_lin)?;
    let innovation = y - model.d() - model.map_state(x_lin)? - &jac * (x_pred - x_lin);
    linearized_update(&jac, model.h(), x_pred, p_pred, &innovation)
}

/// Extended Kalman filter update: one Gauss–Newton step from the prediction.
pub fn ekf_update(y: &DVector<f64>, x_pred: &DVector<f64>, p_pred: &PdMatrix, model: &NonlinearGaussianObservation) -> Result<Update> {
    let (x_filt, p_filt) = gauss_newton_step(y, x_pred, x_pred, p_pred, model)?;
    Ok(Update {
        x_filt,
        p_filt,
        inner_iters: 1,
    })
}

/// Iterated extended Kalman filter: Gauss–Newton steps from the prediction
/// until the gradient of the level-update objective vanishes. Steps that
/// fail to increase the objective are halved.
pub fn gauss_newton_update(
    y: &DVector<f64>,
    x_pred: &DVector<f64>,
    p_pred: &PdMatrix,
    model: &NonlinearGaussianObservation,
    cfg: &FilterConfig,
) -> Result<Update> {
    check_update_dims(y, x_pred, p_pred, model)?;
    let obj = ModeObjective { y, x_pred, p_pred, model };
    let mut x = x_pred.clone();
    let mut f = obj.value(&x)?;
    let tol = cfg.grad_tol * f.abs().max(1.0);
    let mut iters = 0;
    loop {
        let g = obj.gradient(&x)?;
        if g.norm() <= tol {
            break;
        }
        if iters == cfg.max_iter {
            return Err(Error::NoConvergence {
                iters,
                grad_norm: g.norm(),
            });
        }
        let (x_gn, _) = gauss_newton_step(y, &x, x_pred, p_pred, model)?;
        let dir = &x_gn - &x;
        iters += 1;
        match backtrack(&obj, &x, f, &g, &dir) {
            LineSearch::Accepted { x: next, f: fnext } => {
                let done = stalled(&x, &next);
                x = next;
                f = fnext;
                if done {
                    break;
                }
            }
            LineSearch::Failed => {
                return Err(Error::NoConvergence {
                    iters,
                    grad_norm: g.norm(),
                })
            }
        }
    }
    let p_filt = match cfg.info_mode {
        InformationMode::Fisher => gauss_newton_step(y, &x, x_pred, p_pred, model)?.1,
        mode => information_update(p_pred, &information(model, y, &x, mode)?)?,
    };
    Ok(Update {
        x_filt: x,
        p_filt,
        inner_iters: iters,
    })
}

/// The per-step likelihood criterion term at a completed update.
pub fn ll_contribution(
    y: &DVector<f64>,
    model: &dyn ObservationModel,
    x_pred: &DVector<f64>,
    p_pred: &PdMatrix,
    x_filt: &DVector<f64>,
    p_filt: &PdMatrix,
) -> Result<LikelihoodTerm> {
    let fit = model.log_density(y, x_filt)?;
    let penalty = 0.5 * (p_pred.logdet() - p_filt.logdet()) + 0.5 * p_pred.quad_form(&(x_filt - x_pred))?;
    Ok(LikelihoodTerm { fit, penalty })
}

/// Picks the update used by [`run_filter`] for this model and configuration.
pub fn update(
    y: &DVector<f64>,
    x_pred: &DVector<f64>,
    p_pred: &PdMatrix,
    model: &dyn ObservationModel,
    cfg: &FilterConfig,
) -> Result<Update> {
    if !cfg.force_newton {
        if let Some(gauss) = model.as_gaussian() {
            if cfg.info_mode == InformationMode::Fisher {
                return kalman_update(y, x_pred, p_pred, gauss);
            }
        }
        if let Some(nonlinear) = model.as_nonlinear_gaussian() {
            return gauss_newton_update(y, x_pred, p_pred, nonlinear, cfg);
        }
    }
    bellman_update(y, x_pred, p_pred, model, cfg)
}

/// Runs the filter over `data`, recording every step. The first failure
/// aborts the run and carries its 1-based time index.
pub fn run_filter(
    data: &[DVector<f64>],
    trans: &StateTransition,
    model: &dyn ObservationModel,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    cfg.validate()?;
    if model.state_dim() != trans.state_dim() || cfg.x0.len() != trans.state_dim() {
        return Err(dim_mismatch(
            "state dimension (transition, observation, x0)",
            trans.state_dim(),
            (model.state_dim(), cfg.x0.len()),
        ));
    }
    let mut steps = Vec::with_capacity(data.len());
    let mut x = cfg.x0.clone();
    let mut p = cfg.p0.clone();
    for (i, y) in data.iter().enumerate() {
        let t = i + 1;
        let step = filter_step(t, y, &x, &p, trans, model, cfg).map_err(|e| e.at(t))?;
        x = step.x_filt.clone();
        p = step.p_filt.clone();
        steps.push(step);
    }
    let objective = steps.iter().fold(0.0, |acc, s| acc + s.ll_term);
    Ok(FilterOutput { steps, objective })
}

fn filter_step(
    t: usize,
    y: &DVector<f64>,
    x_prev: &DVector<f64>,
    p_prev: &PdMatrix,
    trans: &StateTransition,
    model: &dyn ObservationModel,
    cfg: &FilterConfig,
) -> Result<FilterStep> {
    let (x_pred, p_pred) = predict(x_prev, p_prev, trans)?;
    let up = update(y, &x_pred, &p_pred, model, cfg)?;
    let term = ll_contribution(y, model, &x_pred, &p_pred, &up.x_filt, &up.p_filt)?;
    Ok(FilterStep {
        t,
        x_pred,
        p_pred,
        x_filt: up.x_filt,
        p_filt: up.p_filt,
        fit: term.fit,
        penalty: term.penalty,
        ll_term: term.total(),
        inner_iters: up.inner_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BernoulliObservation, PoissonObservation};
    use nalgebra::{dmatrix, dvector};
    use std::sync::Arc;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn pd(x: f64) -> PdMatrix {
        cholesky(&SymMatrix::scalar(x)).unwrap()
    }

    fn cfg1(x0: f64, p0: f64) -> FilterConfig {
        FilterConfig::new(v(x0), pd(p0))
    }

    /// Root of a monotone scalar function by bisection.
    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) * f(hi) < 0.0);
        while hi - lo > 1e-14 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn predict_examples() {
        let rw = StateTransition::scalar(0.0, 1.0, 1.0).unwrap();
        let (x, p) = predict(&v(0.0), &pd(1.0), &rw).unwrap();
        assert_eq!((x[0], p.matrix()[(0, 0)]), (0.0, 2.0));

        let ar = StateTransition::scalar(1.0, 0.5, 0.0).unwrap();
        let (x, p) = predict(&v(2.0), &pd(1.0), &ar).unwrap();
        assert_eq!((x[0], p.matrix()[(0, 0)]), (2.0, 0.25));

        let st = StateTransition::static_state(2).unwrap();
        let p_prev = cholesky(&SymMatrix::new(dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap()).unwrap();
        let (_, p) = predict(&dvector![1.0, 2.0], &p_prev, &st).unwrap();
        assert_eq!(p.matrix(), p_prev.matrix());
    }

    #[test]
    fn predict_degenerate_model_fails() {
        // rank-one T with Q = 0 collapses P
        let trans = StateTransition::new(
            dvector![0.0, 0.0],
            dmatrix![1.0, 0.0; 0.0, 0.0],
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let err = predict(&dvector![0.0, 0.0], &PdMatrix::identity(2), &trans).unwrap_err();
        assert_eq!(err, Error::NotPositiveDefinite { pivot: 1 });
    }

    #[test]
    fn bellman_gaussian_scalar() {
        let m = GaussianObservation::scalar(0.0, 1.0, 1.0).unwrap();
        let up = bellman_update(&v(1.5), &v(0.0), &pd(2.0), &m, &cfg1(0.0, 1.0)).unwrap();
        assert!((up.x_filt[0] - 1.0).abs() < 1e-12);
        assert!((up.p_filt.matrix()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        let k = kalman_update(&v(1.5), &v(0.0), &pd(2.0), &m).unwrap();
        assert!((k.x_filt[0] - 1.0).abs() < 1e-15);
        assert!((k.p_filt.matrix()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bellman_poisson_first_order_condition_at_zero() {
        let m = PoissonObservation::scalar(0.0, 1.0).unwrap();
        let up = bellman_update(&v(1.0), &v(0.0), &pd(1.0), &m, &cfg1(0.0, 1.0)).unwrap();
        assert_eq!(up.x_filt[0], 0.0);
        assert_eq!(up.inner_iters, 0);
        assert!((up.p_filt.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bellman_poisson_zero_count() {
        let root = bisect(|x| -x.exp() - x, -2.0, 0.0);
        assert!((root + 0.567_143).abs() < 1e-6);
        let m = PoissonObservation::scalar(0.0, 1.0).unwrap();
        for opt in [InnerOptimizer::Newton, InnerOptimizer::QuasiNewton] {
            let cfg = cfg1(0.0, 1.0).with_optimizer(opt);
            let up = bellman_update(&v(0.0), &v(0.0), &pd(1.0), &m, &cfg).unwrap();
            assert!((up.x_filt[0] - root).abs() < 1e-10, "{opt:?}");
            let p = 1.0 / (1.0 + root.exp());
            assert!((up.p_filt.matrix()[(0, 0)] - p).abs() < 1e-10);
            assert!((p - 0.638_104).abs() < 1e-6);
        }
    }

    #[test]
    fn bellman_reports_no_convergence() {
        let m = PoissonObservation::scalar(0.0, 1.0).unwrap();
        let mut cfg = cfg1(0.0, 1.0);
        cfg.max_iter = 1;
        let err = bellman_update(&v(20.0), &v(0.0), &pd(1.0), &m, &cfg).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iters: 1, .. }));
    }

    #[test]
    fn kalman_zero_innovation() {
        let m = GaussianObservation::new(dvector![0.5], dmatrix![1.0, 2.0], dmatrix![0.3]).unwrap();
        let x_pred = dvector![0.2, -0.1];
        let y = m.d() + m.z() * &x_pred;
        let up = kalman_update(&y, &x_pred, &PdMatrix::identity(2), &m).unwrap();
        assert!((&up.x_filt - &x_pred).norm() < 1e-15);
    }

    #[test]
    fn kalman_uninformative_observation() {
        let m = GaussianObservation::scalar(0.0, 1.0, 1e8).unwrap();
        let up = kalman_update(&v(10.0), &v(0.0), &pd(2.0), &m).unwrap();
        assert!(up.x_filt[0].abs() <= 1e-6 * 10.0);
    }

    #[test]
    fn kalman_dimension_mismatch() {
        let m = GaussianObservation::scalar(0.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            kalman_update(&dvector![1.0, 2.0], &v(0.0), &pd(1.0), &m),
            Err(Error::DimensionMismatch(_))
        ));
    }

    fn square_obs(h: f64) -> NonlinearGaussianObservation {
        NonlinearGaussianObservation::new(
            dvector![0.0],
            1,
            Arc::new(|x: &DVector<f64>| x.map(|v| v * v)),
            Arc::new(|x: &DVector<f64>| DMatrix::from_element(1, 1, 2.0 * x[0])),
            dmatrix![h],
        )
        .unwrap()
    }

    fn linear_as_nonlinear(z: DMatrix<f64>, h: DMatrix<f64>) -> NonlinearGaussianObservation {
        let zc = z.clone();
        let n = z.ncols();
        NonlinearGaussianObservation::new(
            DVector::zeros(z.nrows()),
            n,
            Arc::new(move |x: &DVector<f64>| &zc * x),
            Arc::new(move |_: &DVector<f64>| z.clone()),
            h,
        )
        .unwrap()
    }

    #[test]
    fn gauss_newton_linear_matches_kalman() {
        let z = dmatrix![1.0, 0.5; -0.3, 2.0];
        let h = dmatrix![0.5, 0.1; 0.1, 0.8];
        let nl = linear_as_nonlinear(z.clone(), h.clone());
        let lin = GaussianObservation::new(DVector::zeros(2), z, h).unwrap();
        let x_pred = dvector![0.3, -0.2];
        let p_pred = cholesky(&SymMatrix::new(dmatrix![1.5, 0.2; 0.2, 0.7]).unwrap()).unwrap();
        let y = dvector![1.0, -0.5];
        let cfg = FilterConfig::new(x_pred.clone(), p_pred.clone());
        let gn = gauss_newton_update(&y, &x_pred, &p_pred, &nl, &cfg).unwrap();
        let k = kalman_update(&y, &x_pred, &p_pred, &lin).unwrap();
        assert!((&gn.x_filt - &k.x_filt).amax() < 1e-10);
        assert!((gn.p_filt.matrix() - k.p_filt.matrix()).amax() < 1e-10);
        let ekf = ekf_update(&y, &x_pred, &p_pred, &nl).unwrap();
        assert!((&ekf.x_filt - &k.x_filt).amax() < 1e-12);
    }

    #[test]
    fn gauss_newton_tight_prior_pins_mode() {
        let m = square_obs(1.0);
        let cfg = cfg1(1.0, 1e-6);
        let up = gauss_newton_update(&v(3.0), &v(1.0), &pd(1e-6), &m, &cfg).unwrap();
        assert!((up.x_filt[0] - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn gauss_newton_reaches_stationary_point() {
        let m = square_obs(1.0);
        let cfg = cfg1(1.0, 1.0);
        let up = gauss_newton_update(&v(2.5), &v(1.0), &pd(1.0), &m, &cfg).unwrap();
        // FOC: 2x(y − x²) − (x − 1) = 0
        let foc = 2.0 * up.x_filt[0] * (2.5 - up.x_filt[0].powi(2)) - (up.x_filt[0] - 1.0);
        assert!(foc.abs() < 1e-9);
        let newton = bellman_update(&v(2.5), &v(1.0), &pd(1.0), &m, &cfg).unwrap();
        assert!((newton.x_filt[0] - up.x_filt[0]).abs() < 1e-9);
    }

    #[test]
    fn ll_term_equals_gaussian_predictive_density() {
        let m = GaussianObservation::scalar(0.0, 1.0, 1.0).unwrap();
        let up = kalman_update(&v(1.5), &v(0.0), &pd(2.0), &m).unwrap();
        let term = ll_contribution(&v(1.5), &m, &v(0.0), &pd(2.0), &up.x_filt, &up.p_filt).unwrap();
        let exact = -0.5 * (6.0 * std::f64::consts::PI).ln() - 1.5 * 1.5 / 6.0;
        assert!((term.total() - exact).abs() < 1e-12);
        assert!((term.total() + 1.843_245).abs() < 1e-6);
        assert!(term.penalty >= 0.0);
    }

    #[test]
    fn ll_term_zero_innovation_has_no_quadratic_part() {
        let m = GaussianObservation::scalar(0.0, 1.0, 1.0).unwrap();
        let up = kalman_update(&v(0.0), &v(0.0), &pd(2.0), &m).unwrap();
        let term = ll_contribution(&v(0.0), &m, &v(0.0), &pd(2.0), &up.x_filt, &up.p_filt).unwrap();
        let expected = m.log_density(&v(0.0), &v(0.0)).unwrap() - 0.5 * (2.0 / (2.0 / 3.0_f64)).ln();
        assert!((term.total() - expected).abs() < 1e-14);
    }

    #[test]
    fn run_filter_empty() {
        let trans = StateTransition::scalar(0.0, 1.0, 1.0).unwrap();
        let m = GaussianObservation::scalar(0.0, 1.0, 1.0).unwrap();
        let out = run_filter(&[], &trans, &m, &cfg1(0.0, 1.0)).unwrap();
        assert!(out.steps.is_empty());
        assert_eq!(out.objective, 0.0);
    }

    #[test]
    fn run_filter_single_gaussian_step() {
        let trans = StateTransition::scalar(0.0, 1.0, 1.0).unwrap();
        let m = GaussianObservation::scalar(0.0, 1.0, 1.0).unwrap();
        let out = run_filter(&[v(1.5)], &trans, &m, &cfg1(0.0, 1.0)).unwrap();
        let s = &out.steps[0];
        assert_eq!(s.t, 1);
        assert!((s.x_filt[0] - 1.0).abs() < 1e-15);
        assert!((out.objective + 1.843_245).abs() < 1e-6);
    }

    #[test]
    fn run_filter_attaches_time_index() {
        let trans = StateTransition::scalar(0.0, 1.0, 1.0).unwrap();
        let m = PoissonObservation::scalar(0.0, 1.0).unwrap();
        let err = run_filter(&[v(1.0), v(2.0), v(-1.0)], &trans, &m, &cfg1(0.0, 1.0)).unwrap_err();
        assert_eq!(err.time_index(), Some(3));
        assert!(matches!(err.root(), Error::InvalidObservation(_)));
    }

    #[test]
    fn weighted_mode_validation() {
        let cfg = cfg1(0.0, 1.0).with_info_mode(InformationMode::Weighted(1.5));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fisher_and_realized_agree_for_canonical_links() {
        let trans = StateTransition::scalar(0.0, 0.95, 0.1).unwrap();
        let pois = PoissonObservation::scalar(0.5, 1.0).unwrap();
        let bern = BernoulliObservation::scalar(0.0, 1.0).unwrap();
        let counts: Vec<_> = [0.0, 3.0, 1.0, 2.0, 0.0, 5.0].iter().map(|&c| v(c)).collect();
        let bits: Vec<_> = [0.0, 1.0, 1.0, 0.0, 1.0].iter().map(|&c| v(c)).collect();
        for (model, data) in [(&pois as &dyn ObservationModel, &counts), (&bern, &bits)] {
            let a = run_filter(data, &trans, model, &cfg1(0.0, 1.0)).unwrap();
            let b = run_filter(data, &trans, model, &cfg1(0.0, 1.0).with_info_mode(InformationMode::Realized)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn weighted_information_on_cauchy() {
        use crate::model::CauchyObservation;
        let m = CauchyObservation::new(0.0, dvector![1.0]).unwrap();
        // residual 3 at the mode region → realized curvature negative
        let fisher = information(&m, &v(3.0), &v(0.0), InformationMode::Fisher).unwrap();
        let realized = information(&m, &v(3.0), &v(0.0), InformationMode::Realized).unwrap();
        let half = information(&m, &v(3.0), &v(0.0), InformationMode::Weighted(0.5)).unwrap();
        let mid = 0.5 * (fisher.matrix()[(0, 0)] + realized.matrix()[(0, 0)]);
        assert!((half.matrix()[(0, 0)] - mid).abs() < 1e-15);
        assert!(realized.matrix()[(0, 0)] < 0.0);
    }
}
