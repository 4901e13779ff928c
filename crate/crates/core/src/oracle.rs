//! Independent reference computations used to validate the filter,
//! smoother and estimator: simulation, the exact Kalman likelihood, a brute
//! force mode search, dense joint-Gaussian smoothing and a bootstrap
//! particle filter.
//!
//! Everything here deliberately avoids the crate's own factorization code
//! and leans on nalgebra's decompositions instead.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{cholesky, gain_identity, psd_factor, woodbury_inverse, PdMatrix, SymMatrix};
use crate::model::{GaussianObservation, ObservationModel, StateTransition};
use crate::rng::PortableRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `‖a − b‖∞ / max(1, ‖b‖∞)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub seed: u64,
    /// `x_1..x_n`.
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    /// `η_1..η_n`.
    pub eta_draws: Vec<DVector<f64>>,
}

/// Draws `n` steps of the model from `x0_true`. For each `t` the generator
/// first produces the `m` normals behind `η_t`, then `y_t`.
pub fn simulate(
    trans: &StateTransition,
    model: &dyn ObservationModel,
    n: usize,
    x0_true: &DVector<f64>,
    seed: u64,
) -> Result<SimulationRun> {
    if x0_true.len() != trans.state_dim() || model.state_dim() != trans.state_dim() {
        return Err(dim_mismatch("x0_true/observation state dimension", trans.state_dim(), (x0_true.len(), model.state_dim())));
    }
    let mut rng = PortableRng::seed_from_u64(seed);
    let lq = psd_factor(trans.q());
    let mut run = SimulationRun {
        seed,
        states: Vec::with_capacity(n),
        observations: Vec::with_capacity(n),
        eta_draws: Vec::with_capacity(n),
    };
    let mut x = x0_true.clone();
    for t in 1..=n {
        let eta = &lq * rng.normal_vector(trans.noise_dim());
        x = trans.c() + trans.t() * &x + trans.r() * &eta;
        let y = model.sample(&x, &mut rng).map_err(|e| e.at(t))?;
        run.states.push(x.clone());
        run.observations.push(y);
        run.eta_draws.push(eta);
    }
    Ok(run)
}

/// Rebuilds the state path from `x0` and stored disturbances.
pub fn replay_states(trans: &StateTransition, x0: &DVector<f64>, eta: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut x = x0.clone();
    eta.iter()
        .map(|e| {
            x = trans.c() + trans.t() * &x + trans.r() * e;
            x.clone()
        })
        .collect()
}

fn factor_or_fail(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(m).ok_or(Error::NotPositiveDefinite { pivot: 0 })
}

/// Prediction-error decomposition `Σ log N(y_t; d + Z x̂_{t|t−1}, Z P_{t|t−1} Zᵀ + H)`
/// from the textbook Kalman recursion.
pub fn exact_kalman_loglik(
    data: &[DVector<f64>],
    trans: &StateTransition,
    model: &GaussianObservation,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<f64> {
    let (z, d, h) = (model.z(), model.d(), model.h().matrix());
    if x0.len() != trans.state_dim() || p0.nrows() != trans.state_dim() || z.ncols() != trans.state_dim() {
        return Err(dim_mismatch("exact likelihood state dimension", trans.state_dim(), (x0.len(), z.ncols())));
    }
    let rqr = trans.r() * trans.q().matrix() * trans.r().transpose();
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut total = 0.0;
    for (i, y) in data.iter().enumerate() {
        if y.len() != z.nrows() {
            return Err(dim_mismatch("observation", z.nrows(), y.len()).at(i + 1));
        }
        x = trans.c() + trans.t() * &x;
        p = trans.t() * &p * trans.t().transpose() + &rqr;
        let v = y - d - z * &x;
        let f = z * &p * z.transpose() + h;
        let chol = factor_or_fail(f).map_err(|e| e.at(i + 1))?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let f_inv_v = chol.solve(&v);
        total += -0.5 * (y.len() as f64 * LN_2PI + logdet + v.dot(&f_inv_v));
        let gain = &p * z.transpose() * chol.inverse();
        x += &gain * v;
        p = &p - &gain * z * &p;
        p = 0.5 * (&p + p.transpose());
    }
    Ok(total)
}

/// The mode-update objective `log p(y|x) − ½ (x − x̂)ᵀ P⁻¹ (x − x̂)`, with
/// `P⁻¹` taken from nalgebra's inverse.
fn mode_objective(y: &DVector<f64>, x: &DVector<f64>, x_pred: &DVector<f64>, p_inv: &DMatrix<f64>, model: &dyn ObservationModel) -> f64 {
    let dx = x - x_pred;
    model.log_density(y, x).unwrap_or(f64::NEG_INFINITY) - 0.5 * dx.dot(&(p_inv * &dx))
}

const COARSE_POINTS_1D: usize = 4001;
const COARSE_POINTS_2D: usize = 401;
const ZOOM_POINTS: usize = 41;

/// Brute-force argmax of the mode-update objective over a box.
///
/// A uniform coarse grid over `bounds` is followed by zoomed grids around
/// the incumbent until the spacing drops below `resolution / 4`.
pub fn grid_mode_search(
    y: &DVector<f64>,
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    model: &dyn ObservationModel,
    bounds: &[(f64, f64)],
    resolution: f64,
) -> Result<DVector<f64>> {
    let dim = x_pred.len();
    if dim == 0 || dim > 2 || bounds.len() != dim || p_pred.nrows() != dim {
        return Err(Error::DimensionMismatch(format!(
            "grid search supports state dimension 1 or 2 with matching bounds, got {dim} and {} bounds",
            bounds.len()
        )));
    }
    if !(resolution > 0.0) || bounds.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::Config("grid search needs positive resolution and non-empty bounds".into()));
    }
    let p_inv = p_pred
        .clone()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    let f = |x: &DVector<f64>| mode_objective(y, x, x_pred, &p_inv, model);

    let coarse = if dim == 1 { COARSE_POINTS_1D } else { COARSE_POINTS_2D };
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| linspace(lo, hi, coarse)).collect();
    let (best_idx, mut best) = grid_argmax(&axes, &f);
    if best_idx.iter().any(|&i| i == 0 || i == coarse - 1) {
        return Err(Error::ModeAtBoundary);
    }
    let mut spacing: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo) / (coarse - 1) as f64).collect();
    while spacing.iter().any(|&h| h > 0.25 * resolution) {
        let axes: Vec<Vec<f64>> = (0..dim)
            .map(|k| linspace(best[k] - spacing[k], best[k] + spacing[k], ZOOM_POINTS))
            .collect();
        best = grid_argmax(&axes, &f).1;
        for h in &mut spacing {
            *h *= 2.0 / (ZOOM_POINTS - 1) as f64;
        }
    }
    Ok(best)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn grid_argmax(axes: &[Vec<f64>], f: &(dyn Fn(&DVector<f64>) -> f64 + Sync)) -> (Vec<usize>, DVector<f64>) {
    let points: Vec<Vec<usize>> = match axes.len() {
        1 => (0..axes[0].len()).map(|i| vec![i]).collect(),
        _ => (0..axes[0].len())
            .flat_map(|i| (0..axes[1].len()).map(move |j| vec![i, j]))
            .collect(),
    };
    let at = |idx: &[usize]| DVector::from_iterator(idx.len(), idx.iter().enumerate().map(|(k, &i)| axes[k][i]));
    let values: Vec<f64> = points.par_iter().map(|idx| f(&at(idx))).collect();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    let x = at(&points[best]);
    (points[best].clone(), x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub const JOINT_SMOOTHER_MAX_N: usize = 6;
pub const JOINT_SMOOTHER_MAX_DIM: usize = 3;

/// Smoothed marginals of `x_1..x_n` by conditioning the dense joint normal
/// of states and observations on the data.
pub fn exact_joint_smoother(
    data: &[DVector<f64>],
    trans: &StateTransition,
    model: &GaussianObservation,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<Vec<GaussianMoments>> {
    let n = data.len();
    let d = trans.state_dim();
    let k = model.z().nrows();
    if n == 0 || n > JOINT_SMOOTHER_MAX_N || d > JOINT_SMOOTHER_MAX_DIM {
        return Err(Error::DimensionMismatch(format!(
            "joint smoother supports 1..={JOINT_SMOOTHER_MAX_N} steps and state dimension ≤ {JOINT_SMOOTHER_MAX_DIM}"
        )));
    }
    if x0.len() != d || p0.nrows() != d || data.iter().any(|y| y.len() != k) {
        return Err(dim_mismatch("joint smoother inputs", d, x0.len()));
    }
    let tm = trans.t();
    let rqr = trans.r() * trans.q().matrix() * trans.r().transpose();

    // marginal means and variances of x_t, then cross-covariances T^{t−s} V_s
    let mut means = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    let (mut mu, mut v) = (x0.clone(), p0.clone());
    for _ in 0..n {
        mu = trans.c() + tm * &mu;
        v = tm * &v * tm.transpose() + &rqr;
        means.push(mu.clone());
        vars.push(v.clone());
    }
    let mut sxx = DMatrix::zeros(n * d, n * d);
    for s in 0..n {
        let mut block = vars[s].clone();
        for t in s..n {
            if t > s {
                block = tm * &block;
            }
            sxx.view_mut((t * d, s * d), (d, d)).copy_from(&block);
            sxx.view_mut((s * d, t * d), (d, d)).copy_from(&block.transpose());
        }
    }
    let mut zbig = DMatrix::zeros(n * k, n * d);
    let mut hbig = DMatrix::zeros(n * k, n * k);
    let mut innovation = DVector::zeros(n * k);
    for t in 0..n {
        zbig.view_mut((t * k, t * d), (k, d)).copy_from(model.z());
        hbig.view_mut((t * k, t * k), (k, k)).copy_from(model.h().matrix());
        let r = &data[t] - model.d() - model.z() * &means[t];
        innovation.rows_mut(t * k, k).copy_from(&r);
    }
    let sxy = &sxx * zbig.transpose();
    let syy = &zbig * &sxy + hbig;
    let chol = factor_or_fail(syy)?;
    let post_mean_shift = &sxy * chol.solve(&innovation);
    let post_cov = &sxx - &sxy * chol.solve(&sxy.transpose());
    Ok((0..n)
        .map(|t| GaussianMoments {
            mean: &means[t] + post_mean_shift.rows(t * d, d),
            cov: post_cov.view((t * d, t * d), (d, d)).into_owned(),
        })
        .collect())
}

pub const MIN_PARTICLES: usize = 100;

/// Bootstrap particle filter: particles start from `N(x0, P0)`, move through
/// the transition, are weighted by `p(y_t | x)` and resampled systematically
/// at every step. Moments are taken from the weighted cloud before
/// resampling.
pub fn bootstrap_particle_filter(
    data: &[DVector<f64>],
    trans: &StateTransition,
    model: &dyn ObservationModel,
    n_particles: usize,
    seed: u64,
    x0: &DVector<f64>,
    p0: &PdMatrix,
) -> Result<Vec<GaussianMoments>> {
    if n_particles < MIN_PARTICLES {
        return Err(Error::Config(format!("at least {MIN_PARTICLES} particles are required, got {n_particles}")));
    }
    let d = trans.state_dim();
    if x0.len() != d || p0.dim() != d || model.state_dim() != d {
        return Err(dim_mismatch("particle filter state dimension", d, (x0.len(), p0.dim())));
    }
    let mut rng = PortableRng::seed_from_u64(seed);
    let m = trans.noise_dim();
    let noise_map = trans.r() * psd_factor(trans.q());

    let normals = |rng: &mut PortableRng, rows: usize| random_matrix(rng, rows, n_particles);
    let mut particles = p0.factor() * normals(&mut rng, d);
    for mut col in particles.column_iter_mut() {
        col += x0;
    }

    let mut out = Vec::with_capacity(data.len());
    for (i, y) in data.iter().enumerate() {
        let t = i + 1;
        let mut moved = trans.t() * &particles + &noise_map * normals(&mut rng, m);
        for mut col in moved.column_iter_mut() {
            col += trans.c();
        }
        let log_w: Vec<f64> = (0..n_particles)
            .into_par_iter()
            .map(|j| model.log_density(y, &moved.column(j).clone_owned()))
            .collect::<Result<_>>()
            .map_err(|e| e.at(t))?;
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::WeightCollapse.at(t));
        }
        let mut w: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);

        let wv = DVector::from_vec(w.clone());
        let mean = &moved * &wv;
        let mut centered = moved.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let mut weighted = centered.clone();
        for (j, mut col) in weighted.column_iter_mut().enumerate() {
            col *= w[j];
        }
        let cov = &weighted * centered.transpose();
        out.push(GaussianMoments { mean, cov });

        let picks = systematic_resample(&w, rng.uniform());
        particles = DMatrix::from_fn(d, n_particles, |r, c| moved[(r, picks[c])]);
    }
    Ok(out)
}

/// Indices drawn by systematic resampling with offset `u ∈ [0, 1)`; the
/// result has the same length as `weights` (assumed normalized).
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut picks = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut j = 0;
    for i in 0..n {
        let target = (i as f64 + u) / n as f64;
        while cumulative < target && j + 1 < n {
            j += 1;
            cumulative += weights[j];
        }
        picks.push(j);
    }
    picks
}

/// `∇ log p(y|x)` by central differences with step `1e-5·max(1, |x_i|)`.
pub fn fd_score(model: &dyn ObservationModel, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[i] += h;
        dn[i] -= h;
        out[i] = (model.log_density(y, &up)? - model.log_density(y, &dn)?) / (2.0 * h);
    }
    Ok(out)
}

/// `−∇² log p(y|x)` by central differences of the analytic score, symmetrized.
pub fn fd_neg_hessian(model: &dyn ObservationModel, y: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-5 * x[j].abs().max(1.0);
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[j] += h;
        dn[j] -= h;
        let col = (model.score(y, &up)? - model.score(y, &dn)?) / (2.0 * h);
        out.set_column(j, &(-col));
    }
    Ok(0.5 * (&out + out.transpose()))
}

/// A random stable linear Gaussian model with its filter initialization.
#[derive(Debug, Clone)]
pub struct RandomLinearGaussian {
    pub trans: StateTransition,
    pub obs: GaussianObservation,
    pub x0: DVector<f64>,
    pub p0: PdMatrix,
}

fn random_pd(rng: &mut PortableRng, n: usize, ridge: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n);
    g.transpose() * &g / n as f64 + DMatrix::identity(n, n) * ridge
}

fn random_matrix(rng: &mut PortableRng, rows: usize, cols: usize) -> DMatrix<f64> {
    // column-major fill order
    DMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

/// State dimension `d`, observation dimension `k`; `‖T‖₂ ≤ 0.9`.
pub fn random_linear_gaussian_model(rng: &mut PortableRng, d: usize, k: usize) -> Result<RandomLinearGaussian> {
    let g = random_matrix(rng, d, d);
    let t = &g * (0.9 / g.norm().max(1e-3));
    let c = random_matrix(rng, d, 1).column(0) * 0.1;
    let q = random_pd(rng, d, 0.1);
    let trans = StateTransition::new(c, t, DMatrix::identity(d, d), q)?;
    let z = random_matrix(rng, k, d);
    let dv = random_matrix(rng, k, 1).column(0).into_owned();
    let h = random_pd(rng, k, 0.5);
    let obs = GaussianObservation::new(dv, z, h)?;
    let x0 = random_matrix(rng, d, 1).column(0).into_owned();
    let p0 = cholesky(&SymMatrix::new(random_pd(rng, d, 1.0))?)?;
    Ok(RandomLinearGaussian { trans, obs, x0, p0 })
}

/// Worst relative errors seen over a batch of matrix-lemma instances.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LemmaReport {
    pub instances: usize,
    /// `woodbury_inverse` against a direct inverse of `A + CᵀB⁻¹C`.
    pub woodbury: f64,
    /// `gain_identity` against `(A + CᵀB⁻¹C)⁻¹CᵀB⁻¹` formed directly.
    pub gain: f64,
    /// `M⁻¹M − I` with `M⁻¹` assembled from the first block form.
    pub block_first: f64,
    /// `M⁻¹M − I` with `M⁻¹` assembled from the second block form.
    pub block_second: f64,
}

impl LemmaReport {
    pub fn worst(&self) -> f64 {
        self.woodbury.max(self.gain).max(self.block_first).max(self.block_second)
    }
}

fn inv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or(Error::NotPositiveDefinite { pivot: 0 })
}

/// Checks both inversion lemmas and both block forms of the inverse of
/// `M = [[A, Cᵀ], [C, −B]]` on random instances with `A`, `B` of the form
/// `GᵀG + I` and dimensions 1–6.
pub fn check_matrix_lemmas(rng: &mut PortableRng, instances: usize) -> Result<LemmaReport> {
    let mut report = LemmaReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let na = 1 + (rng.next_u64() % 6) as usize;
        let nb = 1 + (rng.next_u64() % 6) as usize;
        let ga = random_matrix(rng, na, na);
        let gb = random_matrix(rng, nb, nb);
        let a = ga.transpose() * &ga + DMatrix::identity(na, na);
        let b = gb.transpose() * &gb + DMatrix::identity(nb, nb);
        let c = random_matrix(rng, nb, na);

        let (a_inv, b_inv) = (inv(&a)?, inv(&b)?);
        let ct = c.transpose();
        let outer_inv = inv(&(&a + &ct * &b_inv * &c))?;
        let inner_inv = inv(&(&b + &c * &a_inv * &ct))?;

        let a_pd = cholesky(&SymMatrix::new(a.clone())?)?;
        let b_pd = cholesky(&SymMatrix::new(b.clone())?)?;
        let wood = woodbury_inverse(&a_pd, &b_pd, &c)?;
        report.woodbury = report.woodbury.max(rel_err(wood.matrix(), &outer_inv));
        let gain = gain_identity(&a_pd, &b_pd, &c)?;
        let gain_direct = &outer_inv * &ct * &b_inv;
        report.gain = report.gain.max(rel_err(&gain, &gain_direct));

        let n = na + nb;
        let mut m = DMatrix::zeros(n, n);
        m.view_mut((0, 0), (na, na)).copy_from(&a);
        m.view_mut((0, na), (na, nb)).copy_from(&ct);
        m.view_mut((na, 0), (nb, na)).copy_from(&c);
        m.view_mut((na, na), (nb, nb)).copy_from(&(-&b));

        let bottom_left = &inner_inv * &c * &a_inv;
        let assemble = |tl: &DMatrix<f64>, tr: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(n, n);
            out.view_mut((0, 0), (na, na)).copy_from(tl);
            out.view_mut((0, na), (na, nb)).copy_from(tr);
            out.view_mut((na, 0), (nb, na)).copy_from(&bottom_left);
            out.view_mut((na, na), (nb, nb)).copy_from(&(-&inner_inv));
            out
        };
        let first = assemble(&outer_inv, &gain_direct);
        let second = assemble(
            &(&a_inv - &a_inv * &ct * &inner_inv * &c * &a_inv),
            &(&a_inv * &ct * &inner_inv),
        );
        let eye = DMatrix::identity(n, n);
        report.block_first = report.block_first.max(rel_err(&(first * &m), &eye));
        report.block_second = report.block_second.max(rel_err(&(second * &m), &eye));
    }
    Ok(report)
}
