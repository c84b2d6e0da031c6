use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    /// A dense table or design would exceed the configured cell budget.
    #[error("capacity error: {what} needs {cells} cells (limit {limit})")]
    Capacity {
        what: String,
        cells: u128,
        limit: u128,
    },

    #[error("no convergence after {iterations} iterations (last objective {last_objective})")]
    NonConvergence {
        iterations: usize,
        last_objective: f64,
    },

    #[error("maximum likelihood estimate does not exist: {0}")]
    MleNonexistent(String),

    #[error("term {term:?} is not contained in any clique of the decomposition")]
    Coverage { term: Vec<usize> },

    #[error("separator marginal is zero where the clique marginal is positive (separator {separator:?})")]
    Singularity { separator: Vec<usize> },

    #[error("graph is not chordal")]
    NotChordal,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit status used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Capacity { .. } => 2,
            Error::NonConvergence { .. } => 3,
            _ => 1,
        }
    }
}
