use std::fs;
use std::path::{Path, PathBuf};

use bellman_core::filter::information;
use bellman_core::oracle::{self, rel_err, rel_err_vec};
use bellman_core::{
    estimate, run_filter, run_smoother, FilterConfig, FilterOutput, ObservationModel, PortableRng, RunConfig, StateTransition,
    SymMatrix,
};
use nalgebra::DVector;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::table::{field, format_sig, matrix_fields, matrix_names, read_observations, vector_fields, vector_names, Table};

/// Paths and flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: PathBuf,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub force_newton: bool,
}

/// A parsed configuration together with the directory that relative `io`
/// paths are resolved against.
struct Loaded {
    cfg: RunConfig,
    base_dir: PathBuf,
}

fn load(inv: &Invocation) -> CliResult<Loaded> {
    let text = fs::read_to_string(&inv.config).map_err(|e| CliError::Io(format!("{}: {e}", inv.config.display())))?;
    let cfg = RunConfig::from_json(&text).map_err(CliError::config)?;
    let base_dir = inv.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { cfg, base_dir })
}

impl Loaded {
    fn io_path(&self, flag: &Option<PathBuf>, pick: fn(&bellman_core::config::IoSection) -> Option<&String>, key: &str) -> CliResult<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.clone());
        }
        match self.cfg.io.as_ref().and_then(pick) {
            Some(p) => Ok(self.base_dir.join(p)),
            None => Err(CliError::Config(format!("no {key} path: pass --{key} or set 'io.{key}'"))),
        }
    }

    fn data_path(&self, inv: &Invocation) -> CliResult<PathBuf> {
        self.io_path(&inv.data, |io| io.data.as_ref(), "data")
    }

    fn out_path(&self, inv: &Invocation) -> CliResult<PathBuf> {
        self.io_path(&inv.out, |io| io.out.as_ref(), "out")
    }

    fn model(&self) -> CliResult<(StateTransition, Box<dyn ObservationModel>)> {
        self.cfg.model_spec().and_then(|s| s.build()).map_err(CliError::config)
    }

    fn filter_config(&self, force_newton: bool) -> CliResult<FilterConfig> {
        let cfg = self.cfg.filter_config().map_err(CliError::config)?;
        Ok(if force_newton { cfg.with_force_newton(true) } else { cfg })
    }
}

fn print_objective(v: f64) {
    println!("objective={}", format_sig(v, 15));
}

pub fn simulate(inv: &Invocation) -> CliResult<()> {
    let loaded = load(inv)?;
    let (trans, model) = loaded.model()?;
    let sim = loaded.cfg.simulation().map_err(CliError::config)?;
    let x0 = loaded.cfg.simulation_start().map_err(CliError::config)?;
    let out = loaded.out_path(inv)?;
    let run = oracle::simulate(&trans, model.as_ref(), sim.n, &x0, sim.seed).map_err(CliError::run)?;

    let (d, k) = (trans.state_dim(), model.obs_dim());
    let mut header = vec!["t".to_string()];
    header.extend(vector_names("x_true", d));
    header.extend(vector_names("y", k));
    let mut table = Table::new(header);
    for (i, (x, y)) in run.states.iter().zip(&run.observations).enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(vector_fields(x));
        row.extend(vector_fields(y));
        table.push(row);
    }
    table.write(&out)?;
    println!("seed={} n={} state_dim={d} obs_dim={k}", sim.seed, sim.n);
    Ok(())
}

fn filter_run(loaded: &Loaded, inv: &Invocation) -> CliResult<(StateTransition, FilterOutput)> {
    let (trans, model) = loaded.model()?;
    let cfg = loaded.filter_config(inv.force_newton)?;
    let data = read_observations(&loaded.data_path(inv)?, model.obs_dim())?;
    let out = run_filter(&data, &trans, model.as_ref(), &cfg).map_err(CliError::run)?;
    Ok((trans, out))
}

pub fn filter(inv: &Invocation) -> CliResult<()> {
    let loaded = load(inv)?;
    let out_path = loaded.out_path(inv)?;
    let (trans, out) = filter_run(&loaded, inv)?;

    let d = trans.state_dim();
    let mut header = vec!["t".to_string()];
    header.extend(vector_names("x_pred", d));
    header.extend(vector_names("x_filt", d));
    header.extend(matrix_names("P_pred", d));
    header.extend(matrix_names("P_filt", d));
    header.push("ll_term".into());
    header.push("inner_iters".into());
    let mut table = Table::new(header);
    for s in &out.steps {
        let mut row = vec![s.t.to_string()];
        row.extend(vector_fields(&s.x_pred));
        row.extend(vector_fields(&s.x_filt));
        row.extend(matrix_fields(s.p_pred.matrix()));
        row.extend(matrix_fields(s.p_filt.matrix()));
        row.push(field(s.ll_term));
        row.push(s.inner_iters.to_string());
        table.push(row);
    }
    table.write(&out_path)?;
    println!("steps={}", out.steps.len());
    print_objective(out.objective);
    Ok(())
}

pub fn smooth(inv: &Invocation) -> CliResult<()> {
    let loaded = load(inv)?;
    let out_path = loaded.out_path(inv)?;
    let (trans, out) = filter_run(&loaded, inv)?;
    let smoothed = if out.steps.is_empty() {
        Vec::new()
    } else {
        run_smoother(&out, &trans).map_err(CliError::run)?
    };

    let d = trans.state_dim();
    let mut header = vec!["t".to_string()];
    header.extend(vector_names("x_smooth", d));
    header.extend(matrix_names("P_smooth", d));
    let mut table = Table::new(header);
    for s in &smoothed {
        let mut row = vec![s.t.to_string()];
        row.extend(vector_fields(&s.x_smooth));
        row.extend(matrix_fields(s.p_smooth.matrix()));
        table.push(row);
    }
    table.write(&out_path)?;
    println!("steps={}", smoothed.len());
    print_objective(out.objective);
    Ok(())
}

#[derive(Serialize)]
struct EstimateSummary {
    psi_names: Vec<String>,
    psi_hat: Vec<f64>,
    objective: f64,
    evals: usize,
    converged: bool,
}

pub fn estimate_cmd(inv: &Invocation) -> CliResult<()> {
    let loaded = load(inv)?;
    let out_path = loaded.out_path(inv)?;
    let (_, model) = loaded.model()?;
    let data = read_observations(&loaded.data_path(inv)?, model.obs_dim())?;
    let mut problem = loaded.cfg.estimation_problem(data).map_err(CliError::config)?;
    if inv.force_newton {
        problem.filter_cfg.force_newton = true;
    }
    let result = estimate(&problem).map_err(CliError::run)?;
    let summary = EstimateSummary {
        psi_names: problem.params.iter().map(|p| p.name.clone()).collect(),
        psi_hat: result.psi_hat,
        objective: result.objective_at_opt,
        evals: result.evals,
        converged: result.converged,
    };
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Numeric(e.to_string()))?;
    json.push('\n');
    fs::write(&out_path, json).map_err(|e| CliError::Io(format!("{}: {e}", out_path.display())))?;
    println!("evals={} converged={}", summary.evals, summary.converged);
    print_objective(summary.objective);
    Ok(())
}

const CHECK_DEFAULT_N: usize = 200;
const CHECK_DEFAULT_SEED: u64 = 1;
const CHECK_LEMMA_INSTANCES: usize = 200;
const CHECK_PROBES: usize = 50;
const EXACT_TOL: f64 = 1e-8;
const FD_SCORE_TOL: f64 = 1e-6;
const FD_CURVATURE_TOL: f64 = 1e-5;
const PSD_TOL: f64 = 1e-10;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, worst: f64, tol: f64) -> Outcome {
    Outcome {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:e})"),
    }
}

fn failed(name: &'static str, detail: impl ToString) -> Outcome {
    Outcome {
        name,
        passed: false,
        detail: detail.to_string(),
    }
}

/// Smallest eigenvalue of `m`, relative to `max(1, max |m_ij|)`.
fn min_rel_eig(m: &nalgebra::DMatrix<f64>) -> f64 {
    let scale = m.amax().max(1.0);
    match SymMatrix::new(m.clone()) {
        Ok(s) => s.eigenvalues().min() / scale,
        Err(_) => f64::NEG_INFINITY,
    }
}

pub fn check(inv: &Invocation) -> CliResult<()> {
    let loaded = load(inv)?;
    let (trans, model) = loaded.model()?;
    let cfg = loaded.filter_config(inv.force_newton)?;
    let (n, seed, x0) = match &loaded.cfg.simulation {
        Some(s) => (s.n.max(1), s.seed, loaded.cfg.simulation_start().map_err(CliError::config)?),
        None => (CHECK_DEFAULT_N, CHECK_DEFAULT_SEED, cfg.x0.clone()),
    };
    let sim = oracle::simulate(&trans, model.as_ref(), n, &x0, seed).map_err(CliError::run)?;
    let data = &sim.observations;
    let model = model.as_ref();

    let mut results = vec![check_lemmas(seed), check_gradients(model, &sim)];
    results.push(check_information(model, &sim, &cfg));
    let filtered = run_filter(data, &trans, model, &cfg);
    match &filtered {
        Ok(out) => {
            results.push(check_filter_invariants(out));
            results.push(check_smoother(out, &trans));
        }
        Err(e) => {
            results.push(failed("filter invariants", e));
            results.push(failed("smoother ordering", "filter did not complete"));
        }
    }
    if let Some(gauss) = model.as_gaussian() {
        results.extend(check_gaussian(data, &trans, gauss, &cfg, filtered.as_ref().ok()));
    }

    let total = results.len();
    let mut n_failed = 0;
    for r in &results {
        if !r.passed {
            n_failed += 1;
        }
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("check: {} of {total} passed", total - n_failed);
    if n_failed > 0 {
        return Err(CliError::CheckFailed { failed: n_failed, total });
    }
    Ok(())
}

fn check_lemmas(seed: u64) -> Outcome {
    let mut rng = PortableRng::seed_from_u64(seed);
    match oracle::check_matrix_lemmas(&mut rng, CHECK_LEMMA_INSTANCES) {
        Ok(report) => outcome("matrix lemmas", report.worst(), EXACT_TOL),
        Err(e) => failed("matrix lemmas", e),
    }
}

/// Analytic score and curvature against central differences at the simulated
/// states.
fn check_gradients(model: &dyn ObservationModel, sim: &oracle::SimulationRun) -> Outcome {
    let (mut score, mut curvature) = (0.0_f64, 0.0_f64);
    for (x, y) in sim.states.iter().zip(&sim.observations).take(CHECK_PROBES) {
        let pair = (|| -> bellman_core::Result<(f64, f64)> {
            let g = rel_err_vec(&model.score(y, x)?, &oracle::fd_score(model, y, x)?);
            let h = rel_err(model.neg_hessian(y, x)?.matrix(), &oracle::fd_neg_hessian(model, y, x)?);
            Ok((g, h))
        })();
        match pair {
            Ok((g, h)) => {
                score = score.max(g);
                curvature = curvature.max(h);
            }
            Err(e) => return failed("gradients", e),
        }
    }
    Outcome {
        name: "gradients",
        passed: score <= FD_SCORE_TOL && curvature <= FD_CURVATURE_TOL,
        detail: format!(
            "score {score:.3e} (tolerance {FD_SCORE_TOL:e}), curvature {curvature:.3e} (tolerance {FD_CURVATURE_TOL:e})"
        ),
    }
}

/// The information matrix used by the configured mode must be positive
/// semi-definite wherever the filter may evaluate it.
fn check_information(model: &dyn ObservationModel, sim: &oracle::SimulationRun, cfg: &FilterConfig) -> Outcome {
    let mut worst = f64::INFINITY;
    for (x, y) in sim.states.iter().zip(&sim.observations).take(CHECK_PROBES) {
        match information(model, y, x, cfg.info_mode) {
            Ok(j) => worst = worst.min(min_rel_eig(j.matrix())),
            Err(e) => return failed("information positive semi-definite", e),
        }
    }
    Outcome {
        name: "information positive semi-definite",
        passed: worst >= -PSD_TOL,
        detail: format!("smallest relative eigenvalue {worst:.3e}"),
    }
}

fn check_filter_invariants(out: &FilterOutput) -> Outcome {
    let mut shrink = f64::INFINITY;
    let mut penalty = f64::INFINITY;
    for s in &out.steps {
        shrink = shrink.min(min_rel_eig(&(s.p_pred.matrix() - s.p_filt.matrix())));
        penalty = penalty.min(s.penalty);
    }
    Outcome {
        name: "filter invariants",
        passed: shrink >= -PSD_TOL && penalty >= -PSD_TOL,
        detail: format!("{} steps, min eig(P_pred - P_filt) {shrink:.3e}, min penalty {penalty:.3e}", out.steps.len()),
    }
}

fn check_smoother(out: &FilterOutput, trans: &StateTransition) -> Outcome {
    let smoothed = match run_smoother(out, trans) {
        Ok(s) => s,
        Err(e) => return failed("smoother ordering", e),
    };
    let mut worst = f64::INFINITY;
    for (f, s) in out.steps.iter().zip(&smoothed) {
        worst = worst.min(min_rel_eig(s.p_smooth.matrix())).min(min_rel_eig(&(f.p_filt.matrix() - s.p_smooth.matrix())));
    }
    Outcome {
        name: "smoother ordering",
        passed: worst >= -PSD_TOL,
        detail: format!("smallest relative eigenvalue {worst:.3e}"),
    }
}

fn check_gaussian(
    data: &[DVector<f64>],
    trans: &StateTransition,
    gauss: &bellman_core::GaussianObservation,
    cfg: &FilterConfig,
    filtered: Option<&FilterOutput>,
) -> Vec<Outcome> {
    let mut out = Vec::new();
    let fast = cfg.clone().with_force_newton(false);
    let slow = cfg.clone().with_force_newton(true);
    out.push(match (run_filter(data, trans, gauss, &fast), run_filter(data, trans, gauss, &slow)) {
        (Ok(a), Ok(b)) => outcome("kalman equivalence", max_step_diff(&a, &b), EXACT_TOL),
        (Err(e), _) | (_, Err(e)) => failed("kalman equivalence", e),
    });
    out.push(match (filtered, oracle::exact_kalman_loglik(data, trans, gauss, &cfg.x0, cfg.p0.matrix())) {
        (Some(f), Ok(exact)) => outcome("likelihood exactness", (f.objective - exact).abs() / exact.abs().max(1.0), EXACT_TOL),
        (None, _) => failed("likelihood exactness", "filter did not complete"),
        (_, Err(e)) => failed("likelihood exactness", e),
    });
    let n = data.len().min(oracle::JOINT_SMOOTHER_MAX_N);
    if trans.state_dim() <= oracle::JOINT_SMOOTHER_MAX_DIM && n > 0 {
        let head = &data[..n];
        let joint = oracle::exact_joint_smoother(head, trans, gauss, &cfg.x0, cfg.p0.matrix());
        let rts = run_filter(head, trans, gauss, cfg).and_then(|f| run_smoother(&f, trans));
        out.push(match (rts, joint) {
            (Ok(rts), Ok(joint)) => {
                let worst = rts
                    .iter()
                    .zip(&joint)
                    .map(|(s, j)| rel_err_vec(&s.x_smooth, &j.mean).max(rel_err(s.p_smooth.matrix(), &j.cov)))
                    .fold(0.0, f64::max);
                outcome("joint smoother", worst, EXACT_TOL)
            }
            (Err(e), _) | (_, Err(e)) => failed("joint smoother", e),
        });
    }
    out
}

fn max_step_diff(a: &FilterOutput, b: &FilterOutput) -> f64 {
    a.steps
        .iter()
        .zip(&b.steps)
        .map(|(s, k)| {
            rel_err_vec(&s.x_pred, &k.x_pred)
                .max(rel_err_vec(&s.x_filt, &k.x_filt))
                .max(rel_err(s.p_pred.matrix(), k.p_pred.matrix()))
                .max(rel_err(s.p_filt.matrix(), k.p_filt.matrix()))
        })
        .fold(0.0, f64::max)
}
