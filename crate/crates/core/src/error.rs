use thiserror::Error;

use crate::channels::FixedPointResult;
use crate::training::TrainReport;

pub type Result<T, E = TdmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TdmError {
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("argument error: {0}")]
    Argument(String),

    /// A model, density or file failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("conditional undefined: prefix {prefix:?} has zero trace density")]
    UndefinedConditional { prefix: Vec<usize> },

    #[error("sampling error after prefix {prefix:?}: {reason}")]
    Sampling { prefix: Vec<usize>, reason: String },

    #[error("likelihood error: window {window:?} has zero trace density")]
    Likelihood { window: Vec<usize> },

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("fixed point did not converge: residual {residual:e} after {iterations} iterations", residual = best.residual, iterations = best.iterations)]
    NonConvergence { best: Box<FixedPointResult> },

    #[error("projection error: {0}")]
    Projection(String),

    #[error("step error: {0}")]
    Step(String),

    #[error("training error: {reason}")]
    Training {
        reason: String,
        report: Box<TrainReport>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(#[from] serde_json::Error),
}

impl TdmError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TdmError::UndefinedConditional { .. }
                | TdmError::Sampling { .. }
                | TdmError::Likelihood { .. }
                | TdmError::NonConvergence { .. }
                | TdmError::Projection(_)
                | TdmError::Step(_)
                | TdmError::Training { .. }
        )
    }
}
