use thiserror::Error;

use crate::slam::{SolveReport, StateVector};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("terminal unreachable: distance {distance} m exceeds d_max*(N-1) = {budget} m")]
    TerminalUnreachable { distance: f64, budget: f64 },

    #[error("degenerate geometry: UAV and user coincide")]
    DegenerateGeometry,

    #[error("invalid numerology {0}, expected 0..=5")]
    InvalidNumerology(u32),

    #[error("residual delay {delay:e} s outside CIR window of {window:e} s")]
    DelayOutOfWindow { delay: f64, window: f64 },

    #[error("empty channel impulse response")]
    EmptyCir,

    #[error("normal equations are singular even at maximum damping")]
    SingularSystem,

    #[error("Fisher information matrix is singular")]
    SingularFim,

    #[error("solver did not converge after {} iterations", report.iterations)]
    NotConverged {
        state: Box<StateVector>,
        report: SolveReport,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown key: {0}")]
    UnknownKey(String),

    #[error("unit error: {0}")]
    Unit(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem | Error::SingularFim | Error::NotConverged { .. }
        )
    }
}
