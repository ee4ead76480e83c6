//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("control {value} outside [{lo}, {hi}]")]
    ControlOutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("sequence enumeration needs {required} evaluations, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u64 },

    #[error("empty control bucket for u = {0}")]
    EmptyControlBucket(f64),

    #[error("state blow-up {0:.6} s into the step")]
    BlowUp(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("at closed-loop step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("audit mismatch: {0}")]
    AuditMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 for validation problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BlowUp(_) | Error::Numerical(_) => 3,
            Error::AtStep { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
