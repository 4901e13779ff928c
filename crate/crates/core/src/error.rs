use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Cholesky pivot `pivot` (0-based) fell below the scale-relative tolerance.
    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("mode search did not converge after {iters} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iters: usize, grad_norm: f64 },

    #[error("filter output is empty")]
    EmptyFilterOutput,

    #[error("grid mode search: best point lies on the boundary, widen the bounds")]
    ModeAtBoundary,

    #[error("all particle weights underflowed")]
    WeightCollapse,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("t={t}: {source}")]
    AtTime {
        t: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attaches a 1-based time index to an error raised inside a recursion.
    pub fn at(self, t: usize) -> Self {
        match self {
            e @ Error::AtTime { .. } => e,
            e => Error::AtTime {
                t,
                source: Box::new(e),
            },
        }
    }

    /// Time index attached by [`Error::at`], if any.
    pub fn time_index(&self) -> Option<usize> {
        match self {
            Error::AtTime { t, .. } => Some(*t),
            _ => None,
        }
    }

    /// The error with any time annotation stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn dim_mismatch(what: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::DimensionMismatch(format!("{what}: expected {expected:?}, got {got:?}"))
}
