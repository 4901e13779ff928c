//! Static hyperparameter estimation.
//!
//! The criterion is the sum of the filter's per-step terms
//! `log p(y_t | x̂_{t|t}) − ½ log(det P_{t|t−1}/det P_{t|t}) − ½ ‖x̂_{t|t} − x̂_{t|t−1}‖²_{P_{t|t−1}⁻¹}`,
//! maximized over an unconstrained parameter vector with Nelder–Mead. For
//! linear Gaussian models it is the exact log-likelihood.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterConfig, FilterOutput};
use crate::model::{ModelSpec, ObservationModel, StateTransition};

/// Value returned by [`objective`] when the filter fails, so the simplex retreats.
pub const FAILURE_SENTINEL: f64 = -1e300;
pub const MAX_PARAMS: usize = 20;
pub const DEFAULT_MAX_EVALS: usize = 2000;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
/// Offset of each non-initial vertex of the starting simplex (unconstrained scale).
pub const INITIAL_SIMPLEX_STEP: f64 = 0.25;

/// Map from the optimizer's unconstrained scale to a parameter's natural domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Positive parameters (variances): `θ = exp(u)`.
    Log,
    /// Parameters in `(−1, 1)`: `θ = 2/(1 + e^{−u}) − 1`.
    Logistic,
}

impl Transform {
    pub fn to_natural(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logistic => (0.5 * u).tanh(),
        }
    }

    pub fn to_unconstrained(self, theta: f64) -> Result<f64> {
        match self {
            Transform::Identity => Ok(theta),
            Transform::Log if theta > 0.0 => Ok(theta.ln()),
            Transform::Logistic if theta > -1.0 && theta < 1.0 => Ok(((1.0 + theta) / (1.0 - theta)).ln()),
            _ => Err(Error::Config(format!("value {theta} lies outside the domain of the {self:?} transform"))),
        }
    }
}

/// Matrix entry a parameter writes into. Symmetric blocks (`Q`, `H`) are
/// written at both `(i, j)` and `(j, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamTarget {
    C(usize),
    T(usize, usize),
    R(usize, usize),
    Q(usize, usize),
    D(usize),
    Z(usize, usize),
    H(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub transform: Transform,
    /// Starting value on the natural scale.
    pub initial: f64,
    pub target: ParamTarget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_evals: usize,
    /// Convergence when the spread of objective values over the simplex drops below this.
    pub tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_evals: DEFAULT_MAX_EVALS,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationProblem {
    pub params: Vec<ParamSpec>,
    pub data: Vec<DVector<f64>>,
    pub base: ModelSpec,
    pub filter_cfg: FilterConfig,
    pub optimizer: OptimizerConfig,
}

impl EstimationProblem {
    pub fn new(
        params: Vec<ParamSpec>,
        data: Vec<DVector<f64>>,
        base: ModelSpec,
        filter_cfg: FilterConfig,
        optimizer: OptimizerConfig,
    ) -> Result<Self> {
        if params.is_empty() || params.len() > MAX_PARAMS {
            return Err(Error::Config(format!(
                "between 1 and {MAX_PARAMS} parameters are supported, got {}",
                params.len()
            )));
        }
        if optimizer.max_evals == 0 || !(optimizer.tolerance > 0.0) {
            return Err(Error::Config("max_evals and tolerance must be positive".into()));
        }
        let prob = Self {
            params,
            data,
            base,
            filter_cfg,
            optimizer,
        };
        let u0 = prob.initial_unconstrained()?;
        // target indices must exist and the starting model must be valid
        prob.spec_at(&u0)?.build()?;
        prob.filter_cfg.validate()?;
        Ok(prob)
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn initial_unconstrained(&self) -> Result<Vec<f64>> {
        self.params.iter().map(|p| p.transform.to_unconstrained(p.initial)).collect()
    }

    pub fn to_natural(&self, psi: &[f64]) -> Vec<f64> {
        self.params.iter().zip(psi).map(|(p, &u)| p.transform.to_natural(u)).collect()
    }

    /// The base model with every parameter written in.
    pub fn spec_at(&self, psi: &[f64]) -> Result<ModelSpec> {
        if psi.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has length {}, expected {}",
                psi.len(),
                self.params.len()
            )));
        }
        let mut spec = self.base.clone();
        for (p, &u) in self.params.iter().zip(psi) {
            write_target(&mut spec, p, p.transform.to_natural(u))?;
        }
        Ok(spec)
    }

    pub fn model_at(&self, psi: &[f64]) -> Result<(StateTransition, Box<dyn ObservationModel>)> {
        self.spec_at(psi)?.build()
    }

    /// Full filter output at `psi`.
    pub fn filter_at(&self, psi: &[f64]) -> Result<FilterOutput> {
        let (trans, obs) = self.model_at(psi)?;
        run_filter(&self.data, &trans, obs.as_ref(), &self.filter_cfg)
    }
}

fn write_target(spec: &mut ModelSpec, p: &ParamSpec, value: f64) -> Result<()> {
    let out_of_range = || Error::Config(format!("parameter '{}' targets an entry outside its matrix", p.name));
    let tr = &mut spec.transition;
    match p.target {
        ParamTarget::C(i) => *tr.c.get_mut(i).ok_or_else(out_of_range)? = value,
        ParamTarget::T(i, j) => *tr.t.get_mut((i, j)).ok_or_else(out_of_range)? = value,
        ParamTarget::R(i, j) => *tr.r.get_mut((i, j)).ok_or_else(out_of_range)? = value,
        ParamTarget::Q(i, j) => {
            *tr.q.get_mut((i, j)).ok_or_else(out_of_range)? = value;
            *tr.q.get_mut((j, i)).ok_or_else(out_of_range)? = value;
        }
        ParamTarget::D(i) => *spec.observation.d_mut().get_mut(i).ok_or_else(out_of_range)? = value,
        ParamTarget::Z(i, j) => *spec.observation.z_mut().get_mut((i, j)).ok_or_else(out_of_range)? = value,
        ParamTarget::H(i, j) => {
            let kind = spec.observation.kind();
            let h = spec
                .observation
                .h_mut()
                .ok_or_else(|| Error::Config(format!("parameter '{}' targets H, which a {kind} model lacks", p.name)))?;
            *h.get_mut((i, j)).ok_or_else(out_of_range)? = value;
            *h.get_mut((j, i)).ok_or_else(out_of_range)? = value;
        }
    }
    Ok(())
}

/// Filter criterion at the unconstrained point `psi`; any failure yields
/// [`FAILURE_SENTINEL`].
pub fn objective(psi: &[f64], prob: &EstimationProblem) -> f64 {
    match prob.filter_at(psi) {
        Ok(out) if out.objective.is_finite() => out.objective,
        Ok(out) => {
            log::warn!("non-finite objective {} at psi = {psi:?}", out.objective);
            FAILURE_SENTINEL
        }
        Err(e) => {
            match e.time_index() {
                Some(t) => log::warn!("filter failed at t={t} for psi = {psi:?}: {}", e.root()),
                None => log::warn!("model rejected for psi = {psi:?}: {e}"),
            }
            FAILURE_SENTINEL
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    /// Fitted parameters on the natural scale, in `params` order.
    pub psi_hat: Vec<f64>,
    pub psi_hat_unconstrained: Vec<f64>,
    pub objective_at_opt: f64,
    pub evals: usize,
    pub converged: bool,
    /// Per-step criterion terms at the optimum (empty if the filter fails there).
    pub per_t_terms: Vec<f64>,
}

pub fn estimate(prob: &EstimationProblem) -> Result<EstimationResult> {
    let u0 = prob.initial_unconstrained()?;
    let fit = nelder_mead_max(|u| objective(u, prob), &u0, &prob.optimizer);
    let per_t_terms = prob
        .filter_at(&fit.x)
        .map(|out| out.steps.iter().map(|s| s.ll_term).collect())
        .unwrap_or_default();
    Ok(EstimationResult {
        psi_hat: prob.to_natural(&fit.x),
        psi_hat_unconstrained: fit.x,
        objective_at_opt: fit.value,
        evals: fit.evals,
        converged: fit.converged,
        per_t_terms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    /// Best point seen.
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Budget<'f, F> {
    f: &'f F,
    used: usize,
    max: usize,
    best: Option<(Vec<f64>, f64)>,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Budget<'_, F> {
    fn record(&mut self, x: &[f64], v: f64) {
        if self.best.as_ref().map_or(true, |(_, b)| v > *b) {
            self.best = Some((x.to_vec(), v));
        }
    }

    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        if self.used >= self.max {
            return None;
        }
        self.used += 1;
        let v = sanitize((self.f)(x));
        self.record(x, v);
        Some(v)
    }

    /// Evaluates as many of `points` as the budget allows, in parallel.
    fn eval_many(&mut self, points: &[Vec<f64>]) -> Vec<f64> {
        let take = points.len().min(self.max - self.used);
        let f = self.f;
        let values: Vec<f64> = points[..take].par_iter().map(|x| sanitize(f(x))).collect();
        self.used += take;
        for (x, &v) in points.iter().zip(&values) {
            self.record(x, v);
        }
        values
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        FAILURE_SENTINEL
    } else {
        v
    }
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Nelder–Mead maximization from `x0` with the standard coefficients.
///
/// The starting simplex offsets each coordinate by
/// [`INITIAL_SIMPLEX_STEP`]; vertices of the starting simplex and of shrink
/// steps are evaluated concurrently. Stops when the spread of values over
/// the simplex falls below `cfg.tolerance` (converged) or after
/// `cfg.max_evals` evaluations. Ties keep the earlier point, so a flat
/// objective returns `x0`.
pub fn nelder_mead_max<F>(f: F, x0: &[f64], cfg: &OptimizerConfig) -> SimplexResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x0.len();
    let mut budget = Budget {
        f: &f,
        used: 0,
        max: cfg.max_evals,
        best: None,
    };
    let mut simplex: Vec<Vec<f64>> = std::iter::once(x0.to_vec())
        .chain((0..n).map(|i| {
            let mut v = x0.to_vec();
            v[i] += INITIAL_SIMPLEX_STEP;
            v
        }))
        .collect();
    let mut values = budget.eval_many(&simplex);
    let mut converged = false;

    if values.len() == simplex.len() {
        'outer: loop {
            // descending by value; stable so ties keep order
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            if values[0] - values[n] < cfg.tolerance {
                converged = true;
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |from: &[f64], coef: f64| -> Vec<f64> {
                centroid.iter().zip(from).map(|(c, x)| c + coef * (x - c)).collect()
            };
            let worst = simplex[n].clone();
            let reflected = along(&worst, -REFLECT);
            let Some(fr) = budget.eval(&reflected) else { break };

            if fr > values[0] {
                let expanded = along(&worst, -REFLECT * EXPAND);
                let Some(fe) = budget.eval(&expanded) else { break };
                if fe > fr {
                    simplex[n] = expanded;
                    values[n] = fe;
                } else {
                    simplex[n] = reflected;
                    values[n] = fr;
                }
                continue;
            }
            if fr > values[n - 1] {
                simplex[n] = reflected;
                values[n] = fr;
                continue;
            }
            let (contracted, threshold) = if fr > values[n] {
                (along(&reflected, CONTRACT), fr)
            } else {
                (along(&worst, CONTRACT), values[n])
            };
            let Some(fc) = budget.eval(&contracted) else { break };
            if fc > threshold {
                simplex[n] = contracted;
                values[n] = fc;
                continue;
            }
            let best = simplex[0].clone();
            let shrunk: Vec<Vec<f64>> = simplex[1..]
                .iter()
                .map(|v| best.iter().zip(v).map(|(b, x)| b + SHRINK * (x - b)).collect())
                .collect();
            let shrunk_values = budget.eval_many(&shrunk);
            let complete = shrunk_values.len() == shrunk.len();
            for (k, (x, fx)) in shrunk.into_iter().zip(shrunk_values).enumerate() {
                simplex[k + 1] = x;
                values[k + 1] = fx;
            }
            if !complete {
                break 'outer;
            }
        }
    }

    let (x, value) = budget.best.unwrap_or_else(|| (x0.to_vec(), f64::NAN));
    SimplexResult {
        x,
        value,
        evals: budget.used,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::PdMatrix;
    use crate::model::{ObservationSpec, TransitionSpec};
    use nalgebra::{dmatrix, dvector};

    fn local_level(data: Vec<DVector<f64>>) -> EstimationProblem {
        let base = ModelSpec {
            transition: TransitionSpec {
                c: dvector![0.0],
                t: dmatrix![1.0],
                r: dmatrix![1.0],
                q: dmatrix![1.0],
            },
            observation: ObservationSpec::Gaussian {
                d: dvector![0.0],
                z: dmatrix![1.0],
                h: dmatrix![1.0],
            },
        };
        let params = vec![
            ParamSpec {
                name: "q".into(),
                transform: Transform::Log,
                initial: 1.0,
                target: ParamTarget::Q(0, 0),
            },
            ParamSpec {
                name: "h".into(),
                transform: Transform::Log,
                initial: 1.0,
                target: ParamTarget::H(0, 0),
            },
        ];
        let cfg = FilterConfig::new(dvector![0.0], PdMatrix::identity(1));
        EstimationProblem::new(params, data, base, cfg, OptimizerConfig::default()).unwrap()
    }

    #[test]
    fn transforms_round_trip() {
        for t in [Transform::Identity, Transform::Log, Transform::Logistic] {
            for theta in [0.3, 0.999, 1e-3] {
                let u = t.to_unconstrained(theta).unwrap();
                assert!((t.to_natural(u) - theta).abs() < 1e-12, "{t:?} {theta}");
            }
        }
        assert!(Transform::Log.to_unconstrained(0.0).is_err());
        assert!(Transform::Logistic.to_unconstrained(1.0).is_err());
    }

    #[test]
    fn one_step_objective_matches_hand_value() {
        let prob = local_level(vec![dvector![1.5]]);
        let u0 = prob.initial_unconstrained().unwrap();
        let exact = -0.5 * (6.0 * std::f64::consts::PI).ln() - 0.375;
        assert!((objective(&u0, &prob) - exact).abs() < 1e-12);
    }

    #[test]
    fn degenerate_q_stays_finite() {
        let mut prob = local_level(vec![dvector![1.5], dvector![0.2]]);
        prob.base.transition.t = dmatrix![0.5];
        let v = objective(&[-1e6, 0.0], &prob);
        assert!(v.is_finite() && v > FAILURE_SENTINEL);
    }

    #[test]
    fn failing_model_returns_sentinel() {
        let mut prob = local_level(vec![dvector![1.5]]);
        prob.params[1].target = ParamTarget::Q(0, 0);
        prob.params[0].target = ParamTarget::T(0, 0);
        prob.params[0].transform = Transform::Identity;
        // T = 0 violates the transition invariant
        assert_eq!(objective(&[0.0, 0.0], &prob), FAILURE_SENTINEL);
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let prob = local_level(vec![]);
        let mut params = prob.params.clone();
        params[0].target = ParamTarget::Q(3, 3);
        let err = EstimationProblem::new(params, vec![], prob.base.clone(), prob.filter_cfg.clone(), OptimizerConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn too_many_parameters() {
        let prob = local_level(vec![]);
        let params = vec![prob.params[0].clone(); 21];
        let err = EstimationProblem::new(params, vec![], prob.base.clone(), prob.filter_cfg.clone(), OptimizerConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn empty_data_returns_initial() {
        let prob = local_level(vec![]);
        let res = estimate(&prob).unwrap();
        assert_eq!(res.psi_hat, vec![1.0, 1.0]);
        assert_eq!(res.objective_at_opt, 0.0);
    }

    #[test]
    fn single_evaluation_budget() {
        let mut prob = local_level(vec![dvector![1.5], dvector![0.3]]);
        prob.optimizer.max_evals = 1;
        let res = estimate(&prob).unwrap();
        assert!(!res.converged);
        assert_eq!(res.evals, 1);
        assert_eq!(res.psi_hat, vec![1.0, 1.0]);
    }

    #[test]
    fn nelder_mead_finds_quadratic_peak() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 2.0).powi(2) - 0.5 * x[0] * x[1];
        let res = nelder_mead_max(f, &[0.0, 0.0], &OptimizerConfig {
            max_evals: 5000,
            tolerance: 1e-14,
        });
        assert!(res.converged);
        // ∇ = 0: −2(x−1) − 0.5y = 0, −6(y+2) − 0.5x = 0
        let y = (-12.0 - 0.5) / (6.0 - 0.125);
        let x = 1.0 - 0.25 * y;
        assert!((res.x[0] - x).abs() < 1e-5 && (res.x[1] - y).abs() < 1e-5, "{:?}", res.x);
    }

    #[test]
    fn estimation_is_deterministic() {
        let data: Vec<_> = [0.3, 1.2, 0.8, -0.1, 0.5, 1.9, 1.1].iter().map(|&y| dvector![y]).collect();
        let prob = local_level(data);
        assert_eq!(estimate(&prob).unwrap(), estimate(&prob).unwrap());
    }

    #[test]
    fn permuting_parameters_keeps_objective() {
        let data: Vec<_> = [0.3, 1.2, 0.8].iter().map(|&y| dvector![y]).collect();
        let prob = local_level(data);
        let mut swapped = prob.clone();
        swapped.params.swap(0, 1);
        let a = objective(&[0.2, -0.4], &prob);
        let b = objective(&[-0.4, 0.2], &swapped);
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn log_round_trip(theta in 1e-8f64..1e8) {
                let u = Transform::Log.to_unconstrained(theta).unwrap();
                prop_assert!((Transform::Log.to_natural(u) - theta).abs() <= 1e-12 * theta.max(1.0));
            }

            #[test]
            fn logistic_round_trip(theta in -0.999_999f64..0.999_999) {
                let u = Transform::Logistic.to_unconstrained(theta).unwrap();
                prop_assert!((Transform::Logistic.to_natural(u) - theta).abs() <= 1e-12);
            }
        }
    }
}
