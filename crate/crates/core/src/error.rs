use thiserror::Error;

use crate::data::OracleLedger;

pub type Result<T> = std::result::Result<T, AbaeError>;

#[derive(Debug, Error)]
pub enum AbaeError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("oracle budget exhausted after {} of {} calls", .ledger.calls_made(), .ledger.calls_allowed())]
    BudgetExceeded { ledger: Box<OracleLedger> },

    #[error("no positive samples were drawn; the query result is undefined (try a larger budget)")]
    NoPositiveSamples,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("unbound predicate or proxy name `{0}`")]
    Unbound(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AbaeError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AbaeError::Config(msg.into())
    }
}
