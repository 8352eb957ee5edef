//! The Zvonkin transform: resolvent PDE solves on a box, the norm
//! certificate, the homeomorphism `theta = id + u` and the transformed SDE.

pub mod grid;
pub mod map;
pub mod solver;
pub mod transform;

use thiserror::Error;

use crate::linalg::LinalgError;
use crate::model::{EvalError, ModelError};

pub use grid::{Grid, GridFunction};
pub use map::{InverseTrace, ZvonkinMap};
pub use solver::{find_lambda0, solve_resolvent, GridSpec, Lambda0, LadderStep};
pub use transform::{transform, TransformedSde};

#[derive(Debug, Error)]
pub enum ZvonkinError {
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("grid resolution {0} is not supported (need at least 17 nodes per axis, dimension <= 4)")]
    Resolution(usize),
    #[error("grid dimension {grid} does not match the noisy block dimension {noisy}")]
    DimensionMismatch { grid: usize, noisy: usize },
    #[error("Picard iteration at lambda = {lambda} did not converge in {iters} iterations (last update {last_update:e}, residual {residual:e})")]
    NonConvergence { lambda: f64, iters: usize, last_update: f64, residual: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(#[from] LinalgError),
    #[error("point {0:?} lies outside the grid box")]
    OutsideBox(Vec<f64>),
    #[error("map is not certified (norm sum {0} > 1/2)")]
    NotCertified(f64),
    #[error("inverse iteration for y = {0:?} left the grid box")]
    InverseLeftBox(Vec<f64>),
    #[error("inverse iteration for y = {0:?} did not converge")]
    InverseStalled(Vec<f64>),
    #[error("no certified lambda up to {cap}; norm sums along the ladder: {}", fmt_trajectory(.trajectory))]
    NoCertificate { cap: f64, trajectory: Vec<LadderStep> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation error: {0}")]
    Eval(#[from] EvalError),
    #[error("map file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_trajectory(t: &[LadderStep]) -> String {
    t.iter()
        .map(|s| match s.sum {
            Some(v) => format!("{}:{v:.4}", s.lambda),
            None => format!("{}:diverged", s.lambda),
        })
        .collect::<Vec<_>>()
        .join(", ")
}
