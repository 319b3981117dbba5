use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("non-finite pseudo-gradient for player {player} at iteration {iteration}")]
    NonFiniteGradient { player: usize, iteration: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("coupling norm {norm:.6} is not below 1; shrink the edge weight (try w < {suggested_max:.6})")]
    Weight { norm: f64, suggested_max: f64 },

    #[error("eigen-decomposition did not converge")]
    EigenSolver,

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("boundary case: {0}")]
    BoundaryCase(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
