//! JSON run configuration.
//!
//! ```json
//! {
//!   "version": 1,
//!   "model": {
//!     "transition": {"c": [0.0], "T": [[1.0]], "R": [[1.0]], "Q": [[0.5]]},
//!     "observation": {"kind": "gaussian", "d": [0.0], "Z": [[1.0]], "H": [[1.0]]}
//!   },
//!   "filter": {"info_mode": "fisher", "x0": [0.0], "P0": [[1.0]]},
//!   "estimation": {"params": [{"name": "q", "transform": "log", "initial": 1.0,
//!                              "target": {"matrix": "Q", "index": [0, 0]}}]},
//!   "simulation": {"n": 100, "seed": 42},
//!   "io": {"data": "data.csv", "out": "out.csv"}
//! }
//! ```
//!
//! Matrices are row-major nested arrays. Unknown keys are rejected.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{EstimationProblem, OptimizerConfig, ParamSpec, ParamTarget, Transform};
use crate::filter::{FilterConfig, InformationMode, InnerOptimizer, DEFAULT_GRAD_TOL, DEFAULT_MAX_ITER};
use crate::linalg::{cholesky, SymMatrix};
use crate::model::{ModelSpec, ObservationSpec, TransitionSpec};

pub const SCHEMA_VERSION: u32 = 1;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io: Option<IoSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub transition: TransitionConfig,
    pub observation: ObservationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionConfig {
    pub c: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Rows,
    /// Defaults to the identity.
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    #[serde(rename = "Q")]
    pub q: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationKind {
    Gaussian,
    Poisson,
    Bernoulli,
    Cauchy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub kind: ObservationKind,
    pub d: Vec<f64>,
    #[serde(rename = "Z")]
    pub z: Rows,
    /// Required for (and only allowed with) the Gaussian kind.
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Rows>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoModeConfig {
    Fisher,
    Realized,
    Weighted(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Newton,
    QuasiNewton,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info_mode: Option<InfoModeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// Defaults to zeros.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Defaults to the identity.
    #[serde(rename = "P0", default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_newton: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Log,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// One of `c`, `T`, `R`, `Q`, `d`, `Z`, `H`.
    pub matrix: String,
    /// `[i]` for the vectors `c` and `d`, `[i, j]` for matrices.
    pub index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamConfig {
    pub name: String,
    pub transform: TransformKind,
    pub initial: f64,
    pub target: TargetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub params: Vec<ParamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_evals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub n: usize,
    pub seed: u64,
    /// Defaults to the filter's `x0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_true: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

fn to_matrix(key: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("'{key}' must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
}

fn to_vector(key: &str, v: &[f64]) -> Result<DVector<f64>> {
    if v.is_empty() {
        return Err(Error::Config(format!("'{key}' must be a non-empty array")));
    }
    Ok(DVector::from_column_slice(v))
}

/// Row-major nested arrays from a matrix.
pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "'version' must be {SCHEMA_VERSION}, got {}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let tr = &self.model.transition;
        let t = to_matrix("model.transition.T", &tr.t)?;
        let r = match &tr.r {
            Some(r) => to_matrix("model.transition.R", r)?,
            None => DMatrix::identity(t.nrows(), t.nrows()),
        };
        let transition = TransitionSpec {
            c: to_vector("model.transition.c", &tr.c)?,
            t,
            r,
            q: to_matrix("model.transition.Q", &tr.q)?,
        };
        let ob = &self.model.observation;
        let d = to_vector("model.observation.d", &ob.d)?;
        let z = to_matrix("model.observation.Z", &ob.z)?;
        let observation = match (ob.kind, &ob.h) {
            (ObservationKind::Gaussian, Some(h)) => ObservationSpec::Gaussian {
                d,
                z,
                h: to_matrix("model.observation.H", h)?,
            },
            (ObservationKind::Gaussian, None) => {
                return Err(Error::Config("'model.observation.H' is required for a gaussian observation".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Config("'model.observation.H' is only allowed for a gaussian observation".into()))
            }
            (ObservationKind::Poisson, None) => ObservationSpec::Poisson { d, z },
            (ObservationKind::Bernoulli, None) => ObservationSpec::Bernoulli { d, z },
            (ObservationKind::Cauchy, None) => ObservationSpec::Cauchy { d, z },
        };
        Ok(ModelSpec {
            transition,
            observation,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.model.transition.t.len()
    }

    pub fn filter_config(&self) -> Result<FilterConfig> {
        let n = self.state_dim();
        let section = self.filter.clone().unwrap_or_default();
        let x0 = match &section.x0 {
            Some(x) => to_vector("filter.x0", x)?,
            None => DVector::zeros(n),
        };
        let p0 = match &section.p0 {
            Some(p) => to_matrix("filter.P0", p)?,
            None => DMatrix::identity(n, n),
        };
        let p0 = cholesky(&SymMatrix::new(p0)?).map_err(|_| Error::Config("'filter.P0' must be positive definite".into()))?;
        let info_mode = match section.info_mode.unwrap_or(InfoModeConfig::Fisher) {
            InfoModeConfig::Fisher => InformationMode::Fisher,
            InfoModeConfig::Realized => InformationMode::Realized,
            InfoModeConfig::Weighted(w) => InformationMode::Weighted(w),
        };
        let optimizer = match section.optimizer.unwrap_or(OptimizerKind::Newton) {
            OptimizerKind::Newton => InnerOptimizer::Newton,
            OptimizerKind::QuasiNewton => InnerOptimizer::QuasiNewton,
        };
        let cfg = FilterConfig {
            info_mode,
            optimizer,
            grad_tol: section.grad_tol.unwrap_or(DEFAULT_GRAD_TOL),
            max_iter: section.max_iter.unwrap_or(DEFAULT_MAX_ITER),
            x0,
            p0,
            force_newton: section.force_newton.unwrap_or(false),
        };
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("filter: {msg}")),
            Error::DimensionMismatch(msg) => Error::Config(format!("filter.x0/filter.P0: {msg}")),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn simulation(&self) -> Result<&SimulationSection> {
        self.simulation
            .as_ref()
            .ok_or_else(|| Error::Config("the 'simulation' block (with 'n' and 'seed') is required".into()))
    }

    /// Starting state for simulation: `x0_true`, else the filter's `x0`.
    pub fn simulation_start(&self) -> Result<DVector<f64>> {
        match &self.simulation()?.x0_true {
            Some(x) => to_vector("simulation.x0_true", x),
            None => Ok(self.filter_config()?.x0),
        }
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let est = self
            .estimation
            .as_ref()
            .ok_or_else(|| Error::Config("the 'estimation' block is required".into()))?;
        est.params.iter().map(param_spec).collect()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let default = OptimizerConfig::default();
        match &self.estimation {
            Some(e) => OptimizerConfig {
                max_evals: e.max_evals.unwrap_or(default.max_evals),
                tolerance: e.tolerance.unwrap_or(default.tolerance),
            },
            None => default,
        }
    }

    pub fn estimation_problem(&self, data: Vec<DVector<f64>>) -> Result<EstimationProblem> {
        EstimationProblem::new(
            self.param_specs()?,
            data,
            self.model_spec()?,
            self.filter_config()?,
            self.optimizer_config(),
        )
    }
}

fn param_spec(p: &ParamConfig) -> Result<ParamSpec> {
    let idx = &p.target.index;
    let bad = || {
        Error::Config(format!(
            "estimation.params '{}': target {} needs {} index entries",
            p.name,
            p.target.matrix,
            if matches!(p.target.matrix.as_str(), "c" | "d") { 1 } else { 2 }
        ))
    };
    let pair = || if idx.len() == 2 { Ok((idx[0], idx[1])) } else { Err(bad()) };
    let single = || if idx.len() == 1 { Ok(idx[0]) } else { Err(bad()) };
    let target = match p.target.matrix.as_str() {
        "c" => ParamTarget::C(single()?),
        "d" => ParamTarget::D(single()?),
        "T" => pair().map(|(i, j)| ParamTarget::T(i, j))?,
        "R" => pair().map(|(i, j)| ParamTarget::R(i, j))?,
        "Q" => pair().map(|(i, j)| ParamTarget::Q(i, j))?,
        "Z" => pair().map(|(i, j)| ParamTarget::Z(i, j))?,
        "H" => pair().map(|(i, j)| ParamTarget::H(i, j))?,
        other => {
            return Err(Error::Config(format!(
                "estimation.params '{}': unknown target matrix '{other}'",
                p.name
            )))
        }
    };
    let transform = match p.transform {
        TransformKind::Identity => Transform::Identity,
        TransformKind::Log => Transform::Log,
        TransformKind::Logistic => Transform::Logistic,
    };
    Ok(ParamSpec {
        name: p.name.clone(),
        transform,
        initial: p.initial,
        target,
    })
}
