#![allow(dead_code)]

use std::sync::Arc;

use bellman_core::linalg::{cholesky, SymMatrix};
use bellman_core::oracle::{self, rel_err};
use bellman_core::{
    BernoulliObservation, CauchyObservation, FilterOutput, GaussianObservation, NonlinearGaussianObservation, ObservationModel,
    PoissonObservation, PortableRng,
};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

pub fn fd_score(model: &dyn ObservationModel, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    oracle::fd_score(model, y, x).unwrap()
}

pub fn fd_neg_hessian(model: &dyn ObservationModel, y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    oracle::fd_neg_hessian(model, y, x).unwrap()
}

/// A named observation model with a probe distribution for `x`.
pub struct ModelCase {
    pub name: &'static str,
    pub model: Box<dyn ObservationModel>,
    pub x_scale: f64,
}

fn nonlinear_pair() -> NonlinearGaussianObservation {
    NonlinearGaussianObservation::new(
        dvector![0.1, -0.2],
        2,
        Arc::new(|x: &DVector<f64>| dvector![x[0] * x[0] + 0.5 * x[1], x[1].sin() + x[0] * x[1]]),
        Arc::new(|x: &DVector<f64>| dmatrix![2.0 * x[0], 0.5; x[1], x[1].cos() + x[0]]),
        dmatrix![0.6, 0.1; 0.1, 0.9],
    )
    .unwrap()
}

/// Every observation density the crate ships, in small dimensions.
pub fn model_zoo() -> Vec<ModelCase> {
    vec![
        ModelCase {
            name: "gaussian",
            model: Box::new(
                GaussianObservation::new(
                    dvector![0.3, -0.1, 0.0],
                    dmatrix![1.0, 0.2; -0.5, 1.0; 0.3, 0.3],
                    dmatrix![1.0, 0.2, 0.0; 0.2, 0.8, 0.1; 0.0, 0.1, 0.5],
                )
                .unwrap(),
            ),
            x_scale: 2.0,
        },
        ModelCase {
            name: "poisson",
            model: Box::new(PoissonObservation::new(dvector![0.5, -0.2], dmatrix![1.0, 0.0; 0.4, 0.8]).unwrap()),
            x_scale: 1.0,
        },
        ModelCase {
            name: "bernoulli",
            model: Box::new(BernoulliObservation::new(dvector![0.0, 0.3, -0.4], dmatrix![1.0, 0.5; -0.7, 1.0; 0.2, -0.3]).unwrap()),
            x_scale: 2.0,
        },
        ModelCase {
            name: "nonlinear gaussian",
            model: Box::new(nonlinear_pair()),
            x_scale: 1.5,
        },
        ModelCase {
            name: "cauchy",
            model: Box::new(CauchyObservation::new(0.2, dvector![1.0, -0.5]).unwrap()),
            x_scale: 2.0,
        },
    ]
}

/// Random probe `(y, x)`: `x` uniform on `[−scale, scale]`, `y` drawn from the model at `x`.
pub fn probe(case: &ModelCase, rng: &mut PortableRng) -> (DVector<f64>, DVector<f64>) {
    let n = case.model.state_dim();
    let x = DVector::from_fn(n, |_, _| case.x_scale * (2.0 * rng.uniform() - 1.0));
    let y = case.model.sample(&x, rng).unwrap();
    (y, x)
}

/// Worst violations of the per-step invariants over a filter run.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepInvariants {
    pub steps: usize,
    /// Steps where re-factorizing `P_pred` or `P_filt` failed.
    pub factor_failures: usize,
    /// Smallest eigenvalue of `P_pred − P_filt`, relative to `max(1, ‖P_pred‖)`.
    pub min_shrink_eig: f64,
    pub min_penalty: f64,
}

impl StepInvariants {
    pub fn new() -> Self {
        Self {
            steps: 0,
            factor_failures: 0,
            min_shrink_eig: f64::INFINITY,
            min_penalty: f64::INFINITY,
        }
    }

    pub fn absorb(&mut self, out: &FilterOutput) {
        for s in &out.steps {
            self.steps += 1;
            for p in [&s.p_pred, &s.p_filt] {
                if cholesky(&SymMatrix::new(p.matrix().clone()).unwrap()).is_err() {
                    self.factor_failures += 1;
                }
            }
            let diff = SymMatrix::new(s.p_pred.matrix() - s.p_filt.matrix()).unwrap();
            let scale = s.p_pred.matrix().amax().max(1.0);
            let eig = diff.eigenvalues().min() / scale;
            self.min_shrink_eig = self.min_shrink_eig.min(eig);
            self.min_penalty = self.min_penalty.min(s.penalty);
        }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.factor_failures == 0 && self.min_shrink_eig >= -tol && self.min_penalty >= -tol
    }
}

/// Largest relative difference between two filter runs across all four
/// per-step moments.
pub fn max_step_diff(a: &FilterOutput, b: &FilterOutput) -> f64 {
    assert_eq!(a.steps.len(), b.steps.len());
    a.steps
        .iter()
        .zip(&b.steps)
        .map(|(s, k)| {
            let v = |x: &DVector<f64>| DMatrix::from_column_slice(x.len(), 1, x.as_slice());
            rel_err(&v(&s.x_pred), &v(&k.x_pred))
                .max(rel_err(&v(&s.x_filt), &v(&k.x_filt)))
                .max(rel_err(s.p_pred.matrix(), k.p_pred.matrix()))
                .max(rel_err(s.p_filt.matrix(), k.p_filt.matrix()))
        })
        .fold(0.0, f64::max)
}
