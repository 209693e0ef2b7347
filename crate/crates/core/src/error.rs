use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid curve: {0}")]
    InvalidCurve(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("structurally infeasible: {0}")]
    StructurallyInfeasible(String),

    #[error("LP solver failure ({status}): {message}")]
    Solver { status: String, message: String },

    #[error("rounding invariant breached: {0}")]
    InvariantBreach(String),

    #[error("enumeration too large: {0}")]
    EnumerationCap(String),

    #[error("series truncation failed: {0}")]
    Truncation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}
