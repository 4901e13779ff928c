//! Bellman filtering and smoothing for state-space models with linear
//! Gaussian state dynamics and log-concave observation densities.
//!
//! The filter replaces the Kalman update by a mode search on the
//! observation log-likelihood plus a quadratic penalty around the
//! prediction, and reduces exactly to the Kalman filter for linear
//! Gaussian observations. A Rauch–Tung–Striebel smoother runs over the
//! filter output, and static parameters are estimated by maximizing the
//! filter's likelihood criterion.
//!
//! ```
//! use bellman_core::{run_filter, FilterConfig, GaussianObservation, PdMatrix, StateTransition};
//! use nalgebra::dvector;
//!
//! let trans = StateTransition::scalar(0.0, 1.0, 1.0).unwrap();
//! let obs = GaussianObservation::scalar(0.0, 1.0, 1.0).unwrap();
//! let cfg = FilterConfig::new(dvector![0.0], PdMatrix::identity(1));
//! let out = run_filter(&[dvector![1.5]], &trans, &obs, &cfg).unwrap();
//! assert!((out.steps[0].x_filt[0] - 1.0).abs() < 1e-12);
//! ```

pub mod config;
pub mod error;
pub mod estimation;
pub mod filter;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod smoother;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use estimation::{estimate, objective, EstimationProblem, EstimationResult, OptimizerConfig, ParamSpec, ParamTarget, Transform};
pub use filter::{
    bellman_update, kalman_update, predict, run_filter, FilterConfig, FilterOutput, FilterStep, InformationMode, InnerOptimizer,
};
pub use linalg::{cholesky, PdMatrix, SymMatrix};
pub use model::{
    BernoulliObservation, CauchyObservation, GaussianObservation, ModelSpec, NonlinearGaussianObservation, ObservationModel,
    ObservationSpec, PoissonObservation, StateTransition, TransitionSpec,
};
pub use rng::PortableRng;
pub use smoother::{run_smoother, SmootherStep};
