use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("column {0:?} has no observed values")]
    EmptyColumn(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered during optimization at point {point:?}")]
    NonFinite { point: Vec<f64> },

    #[error("state space has {states} joint assignments, above the cap of {cap}; use dual decomposition")]
    StateSpaceTooLarge { states: u128, cap: u128 },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("constraint on {0} has no observed data to estimate a target from")]
    NoObservedData(String),

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("bad format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the pipeline phase it occurred in.
    pub fn in_phase(self, phase: &str) -> Error {
        Error::Phase {
            phase: phase.to_string(),
            source: Box::new(self),
        }
    }
}
