//! Monte Carlo rare-event probabilities along an epsilon ladder, slope
//! fits and large-deviation bound checks.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::action::RateResult;
use crate::dynamics::Dynamics;
use crate::model::{Region, SdeProblem};
use crate::rng::derive_seed;
use crate::simulate::{stream_path, SimError};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Debug, Error)]
pub enum LdpError {
    #[error("need at least 100 paths per estimate, got {0}")]
    TooFewPaths(usize),
    #[error("all {0} paths escaped the working region")]
    AllEscaped(usize),
    #[error("need at least {need} ladder points with 0 < p < 1, got {got}")]
    TooFewPoints { got: usize, need: usize },
    #[error("fitted slope {0} is positive")]
    PositiveSlope(f64),
    #[error("rate minimization did not converge")]
    RateNotConverged,
    #[error("event lives in dimension {got}, the state in {want}")]
    EventShape { got: usize, want: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub enum EventKind {
    TerminalIn(Region),
    /// `sup_t z_t[coordinate] >= level`.
    PathSupExceeds { coordinate: usize, level: f64 },
    /// Arbitrary predicate on the whole path (states at every node).
    Predicate(Arc<dyn Fn(&[Vec<f64>]) -> bool + Send + Sync>),
}

impl fmt::Debug for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::TerminalIn(r) => f.debug_tuple("TerminalIn").field(r).finish(),
            EventKind::PathSupExceeds { coordinate, level } => f
                .debug_struct("PathSupExceeds")
                .field("coordinate", coordinate)
                .field("level", level)
                .finish(),
            EventKind::Predicate(_) => f.write_str("Predicate(..)"),
        }
    }
}

/// An event with the declared label selecting the bound it exercises.
#[derive(Debug, Clone)]
pub struct EventSpec {
    pub kind: EventKind,
    pub closed: bool,
}

impl EventSpec {
    pub fn terminal(region: Region, closed: bool) -> EventSpec {
        EventSpec {
            kind: EventKind::TerminalIn(region),
            closed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Hit,
    Miss,
    Escape,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbabilityEstimate {
    pub eps: f64,
    /// Paths that stayed in the working region; the denominator of `p_hat`.
    pub n_paths: usize,
    pub hits: usize,
    pub escapes: usize,
    pub p_hat: f64,
    pub ci: (f64, f64),
}

/// Wilson score interval for `hits` successes in `n` trials.
pub fn wilson(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0).min(p) };
    let hi = if hits == n { 1.0 } else { (center + half).min(1.0).max(p) };
    (lo, hi)
}

fn outcome<D: Dynamics + ?Sized>(d: &D, event: &EventSpec, eps: f64, n_steps: usize, seed: u64, path: u64) -> Result<Outcome, SimError> {
    let mut hit = false;
    let mut nodes: Vec<Vec<f64>> = Vec::new();
    let r = stream_path(d, eps, n_steps, seed, path, |k, z| match &event.kind {
        EventKind::TerminalIn(region) => {
            if k == n_steps {
                hit = region.contains(z);
            }
            true
        }
        EventKind::PathSupExceeds { coordinate, level } => {
            hit = z[*coordinate] >= *level;
            !hit
        }
        EventKind::Predicate(_) => {
            nodes.push(z.to_vec());
            true
        }
    });
    match r {
        Ok(()) => {
            if let EventKind::Predicate(f) = &event.kind {
                hit = f(&nodes);
            }
            Ok(if hit { Outcome::Hit } else { Outcome::Miss })
        }
        Err(SimError::Escaped { .. } | SimError::NonFinite { .. } | SimError::Coefficients { .. }) => Ok(Outcome::Escape),
        Err(e) => Err(e),
    }
}

/// Hit frequency over paths `0..n_paths` of the stream keyed by `seed`, with
/// the Wilson 95% interval. Escaped paths are excluded and counted.
pub fn estimate_probability<D: Dynamics + ?Sized>(
    d: &D,
    event: &EventSpec,
    eps: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ProbabilityEstimate, LdpError> {
    if n_paths < 100 {
        return Err(LdpError::TooFewPaths(n_paths));
    }
    if let EventKind::TerminalIn(r) = &event.kind {
        if r.dim() != d.dim() {
            return Err(LdpError::EventShape {
                got: r.dim(),
                want: d.dim(),
            });
        }
    }
    let (hits, escapes) = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            outcome(d, event, eps, n_steps, seed, p).map(|o| match o {
                Outcome::Hit => (1usize, 0usize),
                Outcome::Miss => (0, 0),
                Outcome::Escape => (0, 1),
            })
        })
        .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
    let valid = n_paths - escapes;
    if valid == 0 {
        return Err(LdpError::AllEscaped(n_paths));
    }
    Ok(ProbabilityEstimate {
        eps,
        n_paths: valid,
        hits,
        escapes,
        p_hat: hits as f64 / valid as f64,
        ci: wilson(hits, valid, Z95),
    })
}

/// Finite-epsilon model for `log p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    /// `log p = slope / eps + c`.
    Affine,
    /// `log p = slope / eps + c + log(eps) / 2 + d eps`, the leading terms of
    /// the small-noise expansion for terminal events with a smooth boundary.
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub model: FitModel,
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    /// `(1/eps, log p_hat)` for the points used.
    pub points: Vec<(f64, f64)>,
    pub dropped: usize,
}

/// Weighted least squares of `log p_hat` against `1/eps`. Weights are the
/// inverse delta-method variances `n p / (1 - p)`; points with `n_paths == 0`
/// are treated as exact and fitted unweighted. The covariance of sampled fits
/// is scaled by `max(chi2 / dof, 1)`, of exact fits by the residual variance.
pub fn fit_slope(ladder: &[ProbabilityEstimate], model: FitModel) -> Result<SlopeFit, LdpError> {
    let usable: Vec<&ProbabilityEstimate> = ladder.iter().filter(|e| e.p_hat > 0.0 && e.p_hat < 1.0).collect();
    let k = match model {
        FitModel::Affine => 2,
        FitModel::Asymptotic => 3,
    };
    if usable.len() < 3.max(k) {
        return Err(LdpError::TooFewPoints {
            got: usable.len(),
            need: 3.max(k),
        });
    }
    let exact = usable.iter().all(|e| e.n_paths == 0);
    let n = usable.len();
    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let mut points = Vec::with_capacity(n);
    for (i, e) in usable.iter().enumerate() {
        let lp = e.p_hat.ln();
        points.push((1.0 / e.eps, lp));
        x[(i, 0)] = 1.0 / e.eps;
        x[(i, 1)] = 1.0;
        y[i] = lp;
        if model == FitModel::Asymptotic {
            x[(i, 2)] = e.eps;
            y[i] -= 0.5 * e.eps.ln();
        }
        w[i] = if exact || e.n_paths == 0 {
            1.0
        } else {
            e.n_paths as f64 * e.p_hat / (1.0 - e.p_hat)
        };
    }
    let mut xtw = x.transpose();
    for i in 0..n {
        for j in 0..k {
            xtw[(j, i)] *= w[i];
        }
    }
    let normal = &xtw * &x;
    let inv = normal
        .clone()
        .try_inverse()
        .ok_or(LdpError::TooFewPoints { got: n, need: k + 1 })?;
    let beta = &inv * (&xtw * &y);
    let resid = &y - &x * &beta;
    let chi2: f64 = (0..n).map(|i| w[i] * resid[i] * resid[i]).sum();
    let dof = n - k;
    let scale = if exact {
        if dof > 0 {
            chi2 / dof as f64
        } else {
            0.0
        }
    } else if dof > 0 {
        (chi2 / dof as f64).max(1.0)
    } else {
        1.0
    };
    let slope = beta[0];
    let stderr = (inv[(0, 0)] * scale).max(0.0).sqrt();
    if slope > 0.0 {
        return Err(LdpError::PositiveSlope(slope));
    }
    Ok(SlopeFit {
        model,
        slope,
        stderr,
        intercept: beta[1],
        points,
        dropped: ladder.len() - n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LdpEstimate {
    pub ladder: Vec<ProbabilityEstimate>,
    pub fit: SlopeFit,
    pub with_singular: bool,
}

impl LdpEstimate {
    pub fn slope(&self) -> f64 {
        self.fit.slope
    }

    pub fn stderr(&self) -> f64 {
        self.fit.stderr
    }

    pub fn escapes(&self) -> usize {
        self.ladder.iter().map(|e| e.escapes).sum()
    }

    /// Escaped fraction over all requested paths.
    pub fn escape_fraction(&self) -> f64 {
        let total: usize = self.ladder.iter().map(|e| e.n_paths + e.escapes).sum();
        self.escapes() as f64 / total.max(1) as f64
    }

    /// CSV `eps,n_paths,hits,p_hat,ci_lo,ci_hi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), LdpError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["eps", "n_paths", "hits", "p_hat", "ci_lo", "ci_hi"])
            .map_err(std::io::Error::from)?;
        for e in &self.ladder {
            w.write_record([
                format!("{:?}", e.eps),
                e.n_paths.to_string(),
                e.hits.to_string(),
                format!("{:?}", e.p_hat),
                format!("{:?}", e.ci.0),
                format!("{:?}", e.ci.1),
            ])
            .map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Probabilities along the ladder (point `k` uses seed `derive_seed(seed, k)`)
/// and the slope fit.
pub fn ldp_ladder<D: Dynamics + ?Sized>(
    d: &D,
    event: &EventSpec,
    eps_ladder: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    model: FitModel,
) -> Result<(Vec<ProbabilityEstimate>, SlopeFit), LdpError> {
    let ladder = eps_ladder
        .iter()
        .enumerate()
        .map(|(k, &eps)| estimate_probability(d, event, eps, n_paths, n_steps, derive_seed(seed, k as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let fit = fit_slope(&ladder, model)?;
    Ok((ladder, fit))
}

/// The ladder experiment on the original system; `with_singular = false`
/// replaces `b2` by zero and keeps everything else, seeds included.
#[allow(clippy::too_many_arguments)]
pub fn ldp_experiment(
    problem: &SdeProblem,
    event: &EventSpec,
    eps_ladder: &[f64],
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    with_singular: bool,
    model: FitModel,
) -> Result<LdpEstimate, LdpError> {
    let stripped;
    let p = if with_singular {
        problem
    } else {
        stripped = problem.without_singular();
        &stripped
    };
    let (ladder, fit) = ldp_ladder(p, event, eps_ladder, n_paths, n_steps, seed, model)?;
    Ok(LdpEstimate {
        ladder,
        fit,
        with_singular,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    UpperForClosed,
    LowerForOpen,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub side: BoundSide,
    pub slope: f64,
    pub stderr: f64,
    pub rate: f64,
    pub margin: f64,
    pub passed: bool,
}

/// `slope <= -rate + margin` (closed events) or `slope >= -rate - margin`
/// (open events) with `margin = 2 stderr + 0.1 |rate|`.
pub fn check_bound(slope: f64, stderr: f64, rate: f64, side: BoundSide) -> BoundCheck {
    let margin = 2.0 * stderr + 0.1 * rate.abs();
    let passed = match side {
        BoundSide::UpperForClosed => slope <= -rate + margin,
        BoundSide::LowerForOpen => slope >= -rate - margin,
    };
    BoundCheck {
        side,
        slope,
        stderr,
        rate,
        margin,
        passed,
    }
}

pub fn bound_check(estimate: &LdpEstimate, rate: &RateResult, side: BoundSide) -> Result<BoundCheck, LdpError> {
    if !rate.converged {
        return Err(LdpError::RateNotConverged);
    }
    Ok(check_bound(estimate.slope(), estimate.stderr(), rate.value, side))
}

/// JSON summary written by the `ldp` verb.
#[derive(Debug, Clone, Serialize)]
pub struct LdpReport {
    pub slope: f64,
    pub stderr: f64,
    pub rate_value: Option<f64>,
    pub bound_checks: Vec<BoundCheck>,
    pub model: FitModel,
    pub escapes: usize,
}
