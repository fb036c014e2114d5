//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "graph generation failed: no connected graph after {attempts} attempts (n={n}, p={p})"
    )]
    GraphGeneration { n: usize, p: f64, attempts: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("agent {agent}: Hessian solve failed at inner iteration {inner}")]
    LocalSolve { agent: usize, inner: usize },

    #[error("agent {agent}: neighbor cache has no entry for agent {neighbor}")]
    MissingNeighbor { agent: usize, neighbor: usize },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rate condition violated: {0}")]
    RateCondition(String),

    #[error(
        "centralized solver hit the iteration cap {cap}: residual {residual:.3e} > tol {tol:.3e}"
    )]
    SolverCap { cap: usize, residual: f64, tol: f64 },

    #[error("reference runner invariant violated at round {round}: {what} = {value:.3e}")]
    InvariantViolation {
        round: usize,
        what: String,
        value: f64,
    },
}

impl Error {
    /// Attach the global round index to an error bubbling out of a round.
    pub fn at_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
