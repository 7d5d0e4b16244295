use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent or invalid configuration (bad sizes, bad budgets, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("knot ordering error: t = {t} precedes s = {s}")]
    Ordering { t: usize, s: usize },

    /// A quantity is outside the domain where the requested operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("system is not controllable: {0}")]
    Controllability(String),

    #[error("ill-conditioned covariance at knot {knot}: {detail}")]
    Conditioning { knot: usize, detail: String },

    #[error("unknown block `{0}`")]
    Lookup(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("conic program {label} ended with status {status}")]
    Solver { label: String, status: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("simulation diverged at knot {knot}, agent {agent}")]
    Divergence { knot: usize, agent: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures that stem from an infeasible problem rather than a numerical fault.
    pub fn is_infeasible(&self) -> bool {
        match self {
            Error::Infeasible(_) => true,
            Error::Solver { status, .. } => status == "infeasible",
            _ => false,
        }
    }
}
