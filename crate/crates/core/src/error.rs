use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),

    #[error("matrix is numerically singular: {0}")]
    Singular(String),

    #[error("simulation diverged in chain {chain} at step {step}")]
    SimulationDiverged { chain: usize, step: u64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged {
        epoch: usize,
        /// Last parameter vector that produced a finite loss.
        last_finite_params: Vec<f64>,
    },

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("unknown kind: {0}")]
    UnknownKind(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (divergence, singularity,
    /// non-convergence) as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::SimulationDiverged { .. }
                | Error::TrainingDiverged { .. }
                | Error::NonConvergence(_)
        )
    }
}
