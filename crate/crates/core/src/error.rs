use thiserror::Error;

use crate::linalg::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite iterate at step {step}")]
    NonFiniteIterate { step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("trace has no steps")]
    EmptyTrace,

    #[error("window K = {window} exceeds the {k} executed iterations")]
    WindowTooLarge { window: usize, k: usize },

    #[error("trace only keeps iterates from index {first}; estimator needs index {needed}")]
    TraceTruncated { first: usize, needed: usize },

    #[error("fixed-point solve did not converge within {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("backtracking line search failed after {halvings} halvings")]
    LineSearchFailed { halvings: usize },

    #[error("interior point residuals stagnated at {residual:e} for {iterations} iterations")]
    Infeasible { residual: f64, iterations: usize },

    #[error("interior point step length {alpha:e} too small")]
    StepTooSmall { alpha: f64 },

    #[error("contraction factor {0} is not below 1")]
    RhoNotContractive(f64),

    #[error("map is not superlinear at the last iterate: ‖J_xF‖op = {0:e}")]
    NotSuperlinear(f64),

    #[error("trace with {len} iterates is too short to sample Lipschitz quotients")]
    InsufficientTrace { len: usize },

    #[error("map does not expose analytic constants")]
    NoAnalyticConstants,

    #[error("outer step {alpha_outer} differs from 1/L = {expected}")]
    StepSizeMismatch { alpha_outer: f64, expected: f64 },

    #[error("instance parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    /// Whether the error stems from user configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::Parse { .. }
        )
    }
}
