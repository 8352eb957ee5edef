use std::sync::Arc;

use super::{ZvonkinError, ZvonkinMap};
use crate::model::{Bounds, SdeProblem};

/// Tolerance of the inner inverse iteration used by coefficient evaluation.
pub const INVERSE_TOL: f64 = 1e-13;

/// The SDE for `Y = theta(X)` on the noisy block, the other coordinates
/// untouched.
#[derive(Debug, Clone)]
pub struct TransformedSde {
    pub base: SdeProblem,
    pub map: Arc<ZvonkinMap>,
    /// `Theta(x0)`.
    pub start: Vec<f64>,
    /// Region of the noisy block where paths may travel.
    pub interior: Bounds,
}

/// Builds the transformed system; the map must be certified and live on the
/// noisy block.
pub fn transform(problem: &SdeProblem, map: Arc<ZvonkinMap>) -> Result<TransformedSde, ZvonkinError> {
    if !map.certified {
        return Err(ZvonkinError::NotCertified(map.norm_sum()));
    }
    if map.dim() != problem.noisy_dim() {
        return Err(ZvonkinError::DimensionMismatch {
            grid: map.dim(),
            noisy: problem.noisy_dim(),
        });
    }
    let off = problem.layout.offset();
    let mut start = problem.start.clone();
    map.theta_into(&problem.start[off..], &mut start[off..])?;
    Ok(TransformedSde {
        base: problem.clone(),
        interior: map.interior(),
        map,
        start,
    })
}

impl TransformedSde {
    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Scratch length needed by [`TransformedSde::eval`].
    pub fn scratch_len(&self) -> usize {
        let (n, m) = (self.dim(), self.map.dim());
        3 * n + 2 * m + 2 * m * m
    }

    /// `Theta(z)`: applies `theta` to the noisy block.
    pub fn push(&self, z: &[f64]) -> Result<Vec<f64>, ZvonkinError> {
        let off = self.base.layout.offset();
        let mut out = z.to_vec();
        self.map.theta_into(&z[off..], &mut out[off..])?;
        Ok(out)
    }

    /// `Theta^{-1}(w)`.
    pub fn pull(&self, w: &[f64]) -> Result<Vec<f64>, ZvonkinError> {
        let off = self.base.layout.offset();
        let mut out = w.to_vec();
        let x = self.map.theta_inv(&w[off..], INVERSE_TOL)?.x;
        out[off..].copy_from_slice(&x);
        Ok(out)
    }

    /// Drift and diffusion of the transformed system at `w`:
    /// noisy block `eps lambda u(x) + (I + grad u(x)) b1^eps(z)` and
    /// `(I + grad u(x)) sigma(x)`, other coordinates `b1^eps(z)`, where
    /// `x = theta^{-1}(y)` and `z` is `w` with `y` replaced by `x`.
    pub fn eval(
        &self,
        eps: f64,
        w: &[f64],
        drift: &mut [f64],
        sigma: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<(), ZvonkinError> {
        if self.map.is_zero() {
            let n = self.dim();
            scratch.resize(n.max(scratch.len()), 0.0);
            self.base.eval_drift(eps, w, drift, &mut scratch[..n])?;
            self.base.eval_sigma(w, sigma)?;
            return Ok(());
        }
        let (n, m) = (self.dim(), self.map.dim());
        let off = self.base.layout.offset();
        scratch.resize(self.scratch_len().max(scratch.len()), 0.0);
        let (z, rest) = scratch.split_at_mut(n);
        let (b1, rest) = rest.split_at_mut(n);
        let (tmp, rest) = rest.split_at_mut(n);
        let (ubuf, rest) = rest.split_at_mut(m);
        let (xbuf, rest) = rest.split_at_mut(m);
        let (jac, rest) = rest.split_at_mut(m * m);
        let sig = &mut rest[..m * m];

        z.copy_from_slice(w);
        self.map.theta_inv_into(&w[off..], INVERSE_TOL, xbuf, ubuf, None)?;
        if !self.map.bounds().contains(xbuf) {
            return Err(ZvonkinError::InverseLeftBox(w[off..].to_vec()));
        }
        z[off..].copy_from_slice(xbuf);

        self.base.eval_b1(eps, z, b1, tmp)?;
        self.map.grad_at(xbuf, jac)?;
        for i in 0..m {
            jac[i * m + i] += 1.0;
        }
        drift[..off].copy_from_slice(&b1[..off]);
        if eps != 0.0 {
            self.map.u_at(xbuf, ubuf)?;
        }
        for i in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                acc += jac[i * m + k] * b1[off + k];
            }
            if eps != 0.0 {
                acc += eps * self.map.lambda * ubuf[i];
            }
            drift[off + i] = acc;
        }

        self.base.diffusion.eval(xbuf, sig)?;
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += jac[i * m + k] * sig[k * m + j];
                }
                sigma[i * m + j] = acc;
            }
        }
        Ok(())
    }
}
