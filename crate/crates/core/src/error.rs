use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the discretization, solvers and experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("length mismatch: expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("field belongs to a different grid")]
    GridMismatch,

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("operator weights overflow: {0}")]
    WeightOverflow(String),

    #[error("{stage} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        stage: &'static str,
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("implicit step produced a negative value {value:.3e} at node {node}")]
    NegativeIterate { node: usize, value: f64 },

    #[error(
        "gradient flow diverged: norm {norm:.3e} exceeded cap {cap:.3e}; try a smaller lambda or another initial field"
    )]
    Divergence { norm: f64, cap: f64 },

    #[error("lambda {lambda} lies in the guard band [{lower}, {upper}] around the admissible range")]
    GuardBand { lambda: f64, lower: f64, upper: f64 },

    #[error("cache file {path}: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    /// True for failures of an iterative solver, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NegativeIterate { .. }
                | Error::Divergence { .. }
                | Error::WeightOverflow(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
