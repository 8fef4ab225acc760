//! Calibration analysis for quadratic surrogate losses.
//!
//! The library quantifies how accurately a convex quadratic surrogate must be
//! optimized to guarantee a target excess of the actual task risk.  It
//! computes exact calibration functions by solving small convex QPs, evaluates
//! closed-form lower bounds on them, and ships ready-made constructions for
//! tree-structured multi-class losses and the mean-average-precision ranking
//! loss together with scalable closed-form evaluators.

pub mod calibration;
pub mod cli;
pub mod curve;
pub mod losses;
pub mod matrixcore;
pub mod qpsolve;
pub mod rankanalysis;
pub mod subspaces;

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("QP solver failure: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
