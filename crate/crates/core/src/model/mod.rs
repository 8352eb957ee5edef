//! Problem descriptions, moduli of continuity, vector fields and the
//! regularity probes run before any numerics.

pub mod expr;
pub mod field;
pub mod geometry;
pub mod modulus;
pub mod probe;
pub mod problem;
pub mod registry;

use thiserror::Error;

pub use expr::{EvalError, Expr, ParseError, ParseErrorKind};
pub use field::{parse_field, FieldSpec, OddModulusProfile, Shape, VectorField};
pub use geometry::{Bounds, Region};
pub use modulus::{dini_classify, default_cutoffs, DiniReport, DiniVerdict, Modulus};
pub use problem::{ExperimentSpec, Layout, Perturbation, SdeProblem};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("evaluation error: {0}")]
    Eval(#[from] EvalError),
    #[error("modulus evaluates to {value} at t = {t}")]
    BadModulus { t: f64, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("problem file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
