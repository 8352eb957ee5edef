//! Numerical tools for small-noise SDEs with Dini-continuous singular drifts:
//! the Zvonkin transform, Euler-Maruyama simulation, Freidlin-Wentzell rate
//! minimization and Monte Carlo large-deviation slopes.

pub mod action;
pub mod dynamics;
pub mod ldp;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod simulate;
pub mod zvonkin;

use thiserror::Error;

pub use action::{ActionError, ControlPath, RateOptions, RateResult, SkeletonPath, Target};
pub use dynamics::{Dynamics, DynamicsError};
pub use ldp::{EventSpec, FitModel, LdpError, LdpEstimate, ProbabilityEstimate};
pub use model::{
    Bounds, ExperimentSpec, Layout, ModelError, Modulus, Region, SdeProblem, Shape, VectorField,
};
pub use simulate::{PathSample, SimError};
pub use zvonkin::{TransformedSde, ZvonkinError, ZvonkinMap};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("problem failed validation: {}", failed_rows(.0))]
    Validation(Vec<model::probe::CheckRow>),
    #[error(transparent)]
    Zvonkin(#[from] ZvonkinError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Ldp(#[from] LdpError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn failed_rows(rows: &[model::probe::CheckRow]) -> String {
    rows.iter()
        .filter(|r| r.verdict == model::probe::Verdict::Fail)
        .map(|r| r.assumption.clone())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    /// 1 for a failed check, 2 for bad input, 3 for numerical non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Model(_) | Error::Json(_) | Error::Io(_) => 2,
            Error::Validation(_) | Error::Ldp(_) => 1,
            Error::Zvonkin(ZvonkinError::Model(_) | ZvonkinError::Io(_) | ZvonkinError::Format(_)) => 2,
            Error::Action(ActionError::Io(_) | ActionError::Invalid(_) | ActionError::TargetShape { .. }) => 2,
            Error::Sim(SimError::Io(_) | SimError::Epsilon(_) | SimError::Steps | SimError::NotDegenerate) => 2,
            _ => 3,
        }
    }
}
