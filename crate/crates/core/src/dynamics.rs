//! Common view of the original and the transformed systems used by the
//! simulator, the skeleton integrator and the estimators.

use thiserror::Error;

use crate::model::{EvalError, Layout, SdeProblem};
use crate::zvonkin::{TransformedSde, ZvonkinError};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Zvonkin(#[from] ZvonkinError),
}

/// Drift `b(eps, z)` on the full state and square diffusion on the noisy
/// block, which is the trailing `layout.noisy_dim()` coordinates.
pub trait Dynamics: Sync {
    fn layout(&self) -> Layout;
    fn horizon(&self) -> f64;
    fn start(&self) -> &[f64];
    /// `drift` has length `dim`, `sigma` is row-major `m x m`.
    fn eval(
        &self,
        eps: f64,
        z: &[f64],
        drift: &mut [f64],
        sigma: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<(), DynamicsError>;
    /// The state has left the region where the coefficients are trusted.
    fn escaped(&self, z: &[f64]) -> bool;

    fn dim(&self) -> usize {
        self.layout().dim()
    }

    fn noisy_dim(&self) -> usize {
        self.layout().noisy_dim()
    }
}

impl Dynamics for SdeProblem {
    fn layout(&self) -> Layout {
        self.layout
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn start(&self) -> &[f64] {
        &self.start
    }

    fn eval(
        &self,
        eps: f64,
        z: &[f64],
        drift: &mut [f64],
        sigma: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<(), DynamicsError> {
        let n = self.dim();
        if scratch.len() < n {
            scratch.resize(n, 0.0);
        }
        self.eval_drift(eps, z, drift, &mut scratch[..n])?;
        self.eval_sigma(z, sigma)?;
        Ok(())
    }

    fn escaped(&self, z: &[f64]) -> bool {
        !self.working_box.contains(z)
    }
}

impl Dynamics for TransformedSde {
    fn layout(&self) -> Layout {
        self.base.layout
    }

    fn horizon(&self) -> f64 {
        self.base.horizon
    }

    fn start(&self) -> &[f64] {
        &self.start
    }

    fn eval(
        &self,
        eps: f64,
        z: &[f64],
        drift: &mut [f64],
        sigma: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<(), DynamicsError> {
        Ok(TransformedSde::eval(self, eps, z, drift, sigma, scratch)?)
    }

    /// Outside the working box, or the noisy block outside the map's
    /// interior region.
    fn escaped(&self, z: &[f64]) -> bool {
        let off = self.base.layout.offset();
        !self.base.working_box.contains(z) || !self.interior.contains(&z[off..])
    }
}
