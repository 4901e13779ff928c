//! Python bindings. Models are described by the same JSON run configuration
//! the command-line tool reads; observations and results are plain nested
//! lists with matrices in row-major order.

use bellman_core::config::to_rows;
use bellman_core::oracle::{self, check_matrix_lemmas as lemma_report};
use bellman_core::{Error, FilterOutput, ObservationModel, PortableRng, RunConfig as CoreConfig, StateTransition};
use nalgebra::DVector;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(bellman_filter, BellmanError, PyException, "Numerical or data failure inside the filter.");
create_exception!(bellman_filter, ConfigError, BellmanError, "Invalid run configuration.");

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::Config(_) => ConfigError::new_err(e.to_string()),
        _ => BellmanError::new_err(e.to_string()),
    }
}

/// A validated run configuration.
#[pyclass(frozen, module = "bellman_filter")]
struct RunConfig {
    inner: CoreConfig,
}

impl RunConfig {
    fn model(&self) -> PyResult<(StateTransition, Box<dyn ObservationModel>)> {
        self.inner.model_spec().and_then(|s| s.build()).map_err(to_py)
    }
}

#[pymethods]
impl RunConfig {
    #[new]
    fn new(json: &str) -> PyResult<Self> {
        let inner = CoreConfig::from_json(json).map_err(to_py)?;
        let cfg = Self { inner };
        cfg.model()?;
        cfg.inner.filter_config().map_err(to_py)?;
        Ok(cfg)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> PyResult<usize> {
        Ok(self.model()?.1.obs_dim())
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(state_dim={})", self.inner.state_dim())
    }
}

/// Per-step filter moments.
#[pyclass(frozen, get_all, module = "bellman_filter")]
struct FilterResult {
    x_pred: Vec<Vec<f64>>,
    x_filt: Vec<Vec<f64>>,
    p_pred: Vec<Vec<Vec<f64>>>,
    p_filt: Vec<Vec<Vec<f64>>>,
    ll_terms: Vec<f64>,
    inner_iters: Vec<usize>,
    objective: f64,
}

impl From<&FilterOutput> for FilterResult {
    fn from(out: &FilterOutput) -> Self {
        let vecs = |f: fn(&bellman_core::FilterStep) -> &DVector<f64>| out.steps.iter().map(|s| f(s).as_slice().to_vec()).collect();
        Self {
            x_pred: vecs(|s| &s.x_pred),
            x_filt: vecs(|s| &s.x_filt),
            p_pred: out.steps.iter().map(|s| to_rows(s.p_pred.matrix())).collect(),
            p_filt: out.steps.iter().map(|s| to_rows(s.p_filt.matrix())).collect(),
            ll_terms: out.steps.iter().map(|s| s.ll_term).collect(),
            inner_iters: out.steps.iter().map(|s| s.inner_iters).collect(),
            objective: out.objective,
        }
    }
}

/// Smoothed moments.
#[pyclass(frozen, get_all, module = "bellman_filter")]
struct SmootherResult {
    x_smooth: Vec<Vec<f64>>,
    p_smooth: Vec<Vec<Vec<f64>>>,
}

/// Outcome of parameter estimation; `psi_hat` is on the natural scale.
#[pyclass(frozen, get_all, module = "bellman_filter")]
struct EstimateResult {
    psi_names: Vec<String>,
    psi_hat: Vec<f64>,
    objective: f64,
    evals: usize,
    converged: bool,
}

fn observations(data: Vec<Vec<f64>>, obs_dim: usize) -> PyResult<Vec<DVector<f64>>> {
    data.into_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() == obs_dim {
                Ok(DVector::from_vec(row))
            } else {
                Err(BellmanError::new_err(format!("observation {} has {} entries, expected {obs_dim}", i + 1, row.len())))
            }
        })
        .collect()
}

fn filter_output(config: &RunConfig, data: &[DVector<f64>], force_newton: bool) -> PyResult<(StateTransition, FilterOutput)> {
    let (trans, model) = config.model()?;
    let cfg = config.inner.filter_config().map_err(to_py)?.with_force_newton(force_newton);
    let out = bellman_core::run_filter(data, &trans, model.as_ref(), &cfg).map_err(to_py)?;
    Ok((trans, out))
}

/// Draws states and observations from the configuration's simulation block.
/// Returns `(states, observations)`.
#[pyfunction]
fn simulate(config: &RunConfig) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (trans, model) = config.model()?;
    let sim = config.inner.simulation().map_err(to_py)?;
    let x0 = config.inner.simulation_start().map_err(to_py)?;
    let run = oracle::simulate(&trans, model.as_ref(), sim.n, &x0, sim.seed).map_err(to_py)?;
    let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.as_slice().to_vec()).collect();
    Ok((rows(&run.states), rows(&run.observations)))
}

#[pyfunction]
#[pyo3(signature = (config, data, force_newton = false))]
fn run_filter(py: Python<'_>, config: &RunConfig, data: Vec<Vec<f64>>, force_newton: bool) -> PyResult<FilterResult> {
    let data = observations(data, config.obs_dim()?)?;
    let (_, out) = py.detach(|| filter_output(config, &data, force_newton))?;
    Ok(FilterResult::from(&out))
}

#[pyfunction]
fn run_smoother(py: Python<'_>, config: &RunConfig, data: Vec<Vec<f64>>) -> PyResult<SmootherResult> {
    let data = observations(data, config.obs_dim()?)?;
    let smoothed = py.detach(|| -> PyResult<_> {
        let (trans, out) = filter_output(config, &data, false)?;
        if out.steps.is_empty() {
            return Ok(Vec::new());
        }
        bellman_core::run_smoother(&out, &trans).map_err(to_py)
    })?;
    Ok(SmootherResult {
        x_smooth: smoothed.iter().map(|s| s.x_smooth.as_slice().to_vec()).collect(),
        p_smooth: smoothed.iter().map(|s| to_rows(s.p_smooth.matrix())).collect(),
    })
}

/// Exact Gaussian log-likelihood from the textbook Kalman recursion; only
/// defined for gaussian observation configurations.
#[pyfunction]
fn kalman_loglik(config: &RunConfig, data: Vec<Vec<f64>>) -> PyResult<f64> {
    let (trans, model) = config.model()?;
    let gauss = model
        .as_gaussian()
        .ok_or_else(|| ConfigError::new_err("kalman_loglik needs a gaussian observation model"))?;
    let data = observations(data, model.obs_dim())?;
    let cfg = config.inner.filter_config().map_err(to_py)?;
    oracle::exact_kalman_loglik(&data, &trans, gauss, &cfg.x0, cfg.p0.matrix()).map_err(to_py)
}

#[pyfunction]
fn estimate(py: Python<'_>, config: &RunConfig, data: Vec<Vec<f64>>) -> PyResult<EstimateResult> {
    let data = observations(data, config.obs_dim()?)?;
    let problem = config.inner.estimation_problem(data).map_err(to_py)?;
    let result = py.detach(|| bellman_core::estimate(&problem)).map_err(to_py)?;
    Ok(EstimateResult {
        psi_names: problem.params.iter().map(|p| p.name.clone()).collect(),
        psi_hat: result.psi_hat,
        objective: result.objective_at_opt,
        evals: result.evals,
        converged: result.converged,
    })
}

/// Worst relative errors of the matrix inversion lemmas on random instances,
/// keyed by identity.
#[pyfunction]
#[pyo3(signature = (seed = 0, instances = 100))]
fn check_matrix_lemmas(seed: u64, instances: usize) -> PyResult<Vec<(String, f64)>> {
    let mut rng = PortableRng::seed_from_u64(seed);
    let r = lemma_report(&mut rng, instances).map_err(to_py)?;
    Ok(vec![
        ("woodbury".into(), r.woodbury),
        ("gain".into(), r.gain),
        ("block_first".into(), r.block_first),
        ("block_second".into(), r.block_second),
    ])
}

#[pymodule]
fn bellman_filter(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BellmanError", m.py().get_type::<BellmanError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_class::<RunConfig>()?;
    m.add_class::<FilterResult>()?;
    m.add_class::<SmootherResult>()?;
    m.add_class::<EstimateResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_filter, m)?)?;
    m.add_function(wrap_pyfunction!(run_smoother, m)?)?;
    m.add_function(wrap_pyfunction!(kalman_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(check_matrix_lemmas, m)?)?;
    Ok(())
}
