use thiserror::Error;

use crate::divergence::LossGradient;
use crate::flow::FlowTrajectory;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),

    #[error("format error: {0}")]
    FormatError(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("problem too large for dense evaluation: {rows}x{cols} exceeds {limit} entries")]
    TooLarge { rows: usize, cols: usize, limit: usize },

    /// The duals did not reach the requested tolerance; the gradient assembled
    /// from them is still attached.
    #[error("gradient assembled from non-converged duals (residual {residual:e})")]
    GradientUnreliable {
        partial: Box<LossGradient>,
        residual: f64,
    },

    /// A flow step failed; the frames recorded so far are kept.
    #[error("flow stopped at t = {time}: {source}")]
    FlowInterrupted {
        time: f64,
        partial: Box<FlowTrajectory>,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateMeasure(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
