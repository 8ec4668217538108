use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of bounds: {0}")]
    Index(String),

    #[error("non-finite state produced at layer {layer}")]
    NumericalOverflow { layer: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("missing forward state: {0}")]
    State(String),

    #[error("empty label set")]
    EmptyLabels,

    #[error("infeasible label budget: requested {requested}, only {available} labeled pixels")]
    InfeasibleBudget { requested: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
