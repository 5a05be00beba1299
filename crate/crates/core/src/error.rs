use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite linear predictor {0}")]
    Domain(f64),

    #[error("empty subsample")]
    EmptySample,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("singular Newton matrix (reciprocal condition {rcond:.3e})")]
    SingularHessian { rcond: f64 },

    #[error("degenerate scores: {0}")]
    DegenerateScores(String),

    #[error("probability {p} for record {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: u64, p: f64 },

    #[error("pilot failed: {0}")]
    PilotFailed(String),

    #[error("partition {id} failed: {source}")]
    PartitionFailed {
        id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{} partition(s) failed: {}", .0.len(), summarize_partitions(.0))]
    PartitionsFailed(Vec<(usize, Error)>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{file}:{line}: cannot parse field {field} ({value:?})")]
    Parse {
        file: PathBuf,
        line: u64,
        field: usize,
        value: String,
    },

    #[error("schema error in {file}:{line}: {message}")]
    Schema {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("csv error in {file}: {source}")]
    Csv {
        file: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("cannot open {}: {source}", file.display())]
    Open {
        file: PathBuf,
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{failed} of {total} replications failed (limit 5%); first error: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
}

fn summarize_partitions(errors: &[(usize, Error)]) -> String {
    errors
        .iter()
        .map(|(id, e)| format!("[{id}] {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Schema { .. }
            | Error::Csv { .. }
            | Error::Open { .. }
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::DimensionMismatch { .. } | Error::ProbabilityOutOfRange { .. } => {
                ErrorClass::Data
            }
            Error::PartitionFailed { source, .. } => source.class(),
            Error::PartitionsFailed(list) => list
                .first()
                .map(|(_, e)| e.class())
                .unwrap_or(ErrorClass::Numerical),
            _ => ErrorClass::Numerical,
        }
    }
}
