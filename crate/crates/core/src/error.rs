use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node index {index} out of range for {count} nodes")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("stacked observability matrix of agent {agent} is rank deficient for horizon {horizon} (smallest singular value {min_singular:.3e})")]
    RankDeficient {
        agent: usize,
        horizon: usize,
        min_singular: f64,
    },

    #[error("(A, C) of agent {agent} is not observable")]
    NotObservable { agent: usize },

    #[error("R_ii + p_uu is numerically singular (condition number {condition:.3e})")]
    SingularGain { condition: f64 },

    #[error("stacked current-control system is singular")]
    SingularCoupling,

    #[error("insufficient excitation for agent {agent}: {what} rank {rank} < {required}")]
    RankDeficientData {
        agent: usize,
        what: &'static str,
        rank: usize,
        required: usize,
    },

    #[error("{what} did not converge within {iterations} iterations (last delta {delta:.3e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        delta: f64,
    },

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
