use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DpmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DpmError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid history for customer {id}: {reason}")]
    InvalidHistory { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Every particle weight collapsed; `t` is the 1-based day of the step.
    #[error("degenerate likelihood at day {t}: all particle weights vanished")]
    DegenerateLikelihood { t: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("design has no rows: {0}")]
    EmptyDesign(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("single-class labels: {0}")]
    SingleClass(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("fit aborted after {0} consecutive degenerate customers")]
    TooManySkips(usize),

    #[error("{path}: row {row}{}: {reason}", id.as_ref().map(|i| format!(" (id {i})")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        row: usize,
        id: Option<String>,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl DpmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(DpmError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
