use thiserror::Error;

use crate::model::{ChainState, SpecViolation};

pub type Result<T, E = QfmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QfmError {
    /// A parameter lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// The input is valid but degenerate (constant regressor, exact fit, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model specification: {}", join_violations(.0))]
    InvalidSpec(Vec<SpecViolation>),

    /// A chain aborted; carries the last consistent state for inspection.
    #[error("chain {chain} failed at iteration {iteration}: {source}")]
    ChainFailed {
        chain: usize,
        iteration: usize,
        #[source]
        source: Box<QfmError>,
        partial_state: Box<ChainState>,
    },
}

fn join_violations(v: &[SpecViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl QfmError {
    /// True for failures caused by arithmetic rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        match self {
            QfmError::Numerical(_) => true,
            QfmError::ChainFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
