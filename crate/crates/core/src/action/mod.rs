//! Skeleton equations, the action functional and minimum-action estimates of
//! the Freidlin-Wentzell rate function.

mod optimize;

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{Dynamics, DynamicsError};
use crate::model::Region;
use crate::rng::{normal_pair, stream_rng};
use crate::zvonkin::{TransformedSde, ZvonkinError};

pub use optimize::{bfgs, minimize_rate, rate_via_transform, Bfgs, RateOptions, RateResult};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("skeleton left the working region at step {step}: {state:?}")]
    Escaped { step: usize, state: Vec<f64> },
    #[error("non-finite skeleton state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Zvonkin(#[from] ZvonkinError),
    #[error("{0} skeleton steps is not a positive multiple of {1} control intervals")]
    Steps(usize, usize),
    #[error("control has {got} components per interval, the noise has {want}")]
    ControlShape { got: usize, want: usize },
    #[error("target lives in dimension {got}, the state in {want}")]
    TargetShape { got: usize, want: usize },
    #[error("no feasible control found; best terminal residual {best_residual:e}")]
    Infeasible { best_residual: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Piecewise-constant `hdot` on `n` equal intervals of `[0, T]`, stored
/// row-major `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub hdot: Vec<f64>,
    pub m: usize,
    pub horizon: f64,
}

impl ControlPath {
    pub fn zero(n_intervals: usize, m: usize, horizon: f64) -> ControlPath {
        ControlPath {
            hdot: vec![0.0; n_intervals * m],
            m,
            horizon,
        }
    }

    pub fn constant(v: &[f64], n_intervals: usize, horizon: f64) -> ControlPath {
        ControlPath {
            hdot: v.repeat(n_intervals),
            m: v.len(),
            horizon,
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.hdot.len() / self.m
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_intervals() as f64
    }

    pub fn interval(&self, i: usize) -> &[f64] {
        &self.hdot[i * self.m..(i + 1) * self.m]
    }

    /// CSV with header `interval,hdot_1..hdot_m`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ActionError> {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["interval".to_string()];
        head.extend((1..=self.m).map(|i| format!("hdot_{i}")));
        w.write_record(&head).map_err(std::io::Error::from)?;
        for i in 0..self.n_intervals() {
            let mut row = vec![i.to_string()];
            row.extend(self.interval(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `1/2 int_0^T |hdot|^2 dt`.
pub fn action(h: &ControlPath) -> f64 {
    0.5 * h.hdot.iter().map(|v| v * v).sum::<f64>() * h.dt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub control: ControlPath,
}

impl SkeletonPath {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("skeletons have at least one node")
    }
}

struct RkBuffers {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    scratch: Vec<f64>,
}

impl RkBuffers {
    fn new(n: usize, m: usize) -> RkBuffers {
        RkBuffers {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
            drift: vec![0.0; n],
            sigma: vec![0.0; m * m],
            scratch: Vec::new(),
        }
    }
}

/// `b^0(z) + (0, sigma(z) v)` into `out`.
fn controlled_rhs<D: Dynamics + ?Sized>(
    d: &D,
    z: &[f64],
    v: &[f64],
    out: &mut [f64],
    sigma: &mut [f64],
    scratch: &mut Vec<f64>,
) -> Result<(), DynamicsError> {
    d.eval(0.0, z, out, sigma, scratch)?;
    let m = v.len();
    let off = out.len() - m;
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            acc += sigma[i * m + j] * v[j];
        }
        out[off + i] += acc;
    }
    Ok(())
}

fn rk4_step<D: Dynamics + ?Sized>(d: &D, z: &mut [f64], v: &[f64], dt: f64, b: &mut RkBuffers) -> Result<(), DynamicsError> {
    let n = z.len();
    let stages = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        for i in 0..n {
            b.tmp[i] = if s == 0 { z[i] } else { z[i] + stages[s] * dt * b.k[s - 1][i] };
        }
        controlled_rhs(d, &b.tmp, v, &mut b.drift, &mut b.sigma, &mut b.scratch)?;
        b.k[s].copy_from_slice(&b.drift);
    }
    for i in 0..n {
        z[i] += dt / 6.0 * (b.k[0][i] + 2.0 * b.k[1][i] + 2.0 * b.k[2][i] + b.k[3][i]);
    }
    Ok(())
}

fn check_control<D: Dynamics + ?Sized>(d: &D, h: &ControlPath, n_steps: usize) -> Result<usize, ActionError> {
    if h.m != d.noisy_dim() {
        return Err(ActionError::ControlShape {
            got: h.m,
            want: d.noisy_dim(),
        });
    }
    let ni = h.n_intervals();
    if ni == 0 || n_steps == 0 || n_steps % ni != 0 {
        return Err(ActionError::Steps(n_steps, ni));
    }
    Ok(n_steps / ni)
}

fn integrate<D: Dynamics + ?Sized>(
    d: &D,
    h: &ControlPath,
    n_steps: usize,
    mut visit: impl FnMut(&[f64]),
) -> Result<Vec<f64>, ActionError> {
    let per = check_control(d, h, n_steps)?;
    let dt = h.horizon / n_steps as f64;
    let mut z = d.start().to_vec();
    let mut buf = RkBuffers::new(z.len(), h.m);
    visit(&z);
    for k in 0..n_steps {
        rk4_step(d, &mut z, h.interval(k / per), dt, &mut buf)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ActionError::NonFinite { step: k + 1 });
        }
        if d.escaped(&z) {
            return Err(ActionError::Escaped { step: k + 1, state: z });
        }
        visit(&z);
    }
    Ok(z)
}

/// Classical RK4 for `dz = b^0(z) dt + (0, sigma(z) hdot) dt`; the control
/// enters only the noisy block.
pub fn skeleton<D: Dynamics + ?Sized>(d: &D, h: &ControlPath, n_steps: usize) -> Result<SkeletonPath, ActionError> {
    let mut states = Vec::with_capacity(n_steps + 1);
    integrate(d, h, n_steps, |z| states.push(z.to_vec()))?;
    let dt = h.horizon / n_steps as f64;
    let times = (0..=n_steps)
        .map(|k| if k == n_steps { h.horizon } else { k as f64 * dt })
        .collect();
    Ok(SkeletonPath {
        times,
        states,
        control: h.clone(),
    })
}

/// Terminal state of the skeleton.
pub fn skeleton_endpoint<D: Dynamics + ?Sized>(d: &D, h: &ControlPath, n_steps: usize) -> Result<Vec<f64>, ActionError> {
    integrate(d, h, n_steps, |_| {})
}

/// Constraint on the skeleton endpoint. The residual vanishes exactly on
/// feasible endpoints.
#[derive(Clone)]
pub enum Target {
    Region(Region),
    /// A region of the original coordinates, applied to `Theta^{-1}` of an
    /// endpoint of the transformed system.
    Pullback { region: Region, tsde: Arc<TransformedSde> },
    Custom {
        label: String,
        dim: usize,
        residual: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    },
}

impl fmt::Debug for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Region(r) => f.debug_tuple("Region").field(r).finish(),
            Target::Pullback { region, .. } => f.debug_struct("Pullback").field("region", region).finish(),
            Target::Custom { label, .. } => f.debug_tuple("Custom").field(label).finish(),
        }
    }
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Region(r) | Target::Pullback { region: r, .. } => r.dim(),
            Target::Custom { dim, .. } => *dim,
        }
    }

    pub fn residual(&self, z: &[f64]) -> Result<Vec<f64>, ActionError> {
        Ok(match self {
            Target::Region(r) => r.residual(z),
            Target::Pullback { region, tsde } => region.residual(&tsde.pull(z)?),
            Target::Custom { residual, .. } => residual(z),
        })
    }

    /// A point of the target in the coordinates of the system being
    /// optimized, used for the straight-line starting control.
    pub fn anchor(&self, from: &[f64]) -> Result<Option<Vec<f64>>, ActionError> {
        Ok(match self {
            Target::Region(r) => Some(r.anchor(from)),
            Target::Pullback { region, tsde } => {
                let a = region.anchor(&tsde.pull(from)?);
                tsde.push(&a).ok()
            }
            Target::Custom { .. } => None,
        })
    }
}

/// Controls sampled on the action ball and their skeletons.
#[derive(Debug, Clone)]
pub struct LevelSetProbe {
    pub paths: Vec<SkeletonPath>,
    /// `max |g_t - g_s| / |t - s|^{1/2}` over all sampled paths.
    pub modulus: f64,
}

/// Samples `n_samples` controls uniformly from `{action <= c}` (Gaussian
/// direction, radius `R U^{1/D}`) and reports the Hölder-1/2 modulus of
/// their skeletons. Controls whose skeleton leaves the box are skipped.
pub fn level_set_probe<D: Dynamics + ?Sized>(
    d: &D,
    c: f64,
    n_intervals: usize,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LevelSetProbe, ActionError> {
    if !(c >= 0.0) {
        return Err(ActionError::Invalid(format!("level c must be nonnegative, got {c}")));
    }
    let m = d.noisy_dim();
    let horizon = d.horizon();
    if c == 0.0 {
        let p = skeleton(d, &ControlPath::zero(n_intervals, m, horizon), n_steps)?;
        let modulus = holder_modulus(&p);
        return Ok(LevelSetProbe { paths: vec![p], modulus });
    }
    let dim = n_intervals * m;
    let radius = (2.0 * c * n_intervals as f64 / horizon).sqrt();
    let mut paths = Vec::with_capacity(n_samples);
    for s in 0..n_samples as u64 {
        let mut rng = stream_rng(seed, s);
        let mut g: Vec<f64> = Vec::with_capacity(dim + 1);
        while g.len() < dim {
            let (a, b) = normal_pair(&mut rng);
            g.push(a);
            g.push(b);
        }
        g.truncate(dim);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
        let h = ControlPath {
            hdot: g.iter().map(|v| v / norm * r).collect(),
            m,
            horizon,
        };
        match skeleton(d, &h, n_steps) {
            Ok(p) => paths.push(p),
            Err(ActionError::Escaped { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let modulus = paths.iter().map(holder_modulus).fold(0.0, f64::max);
    Ok(LevelSetProbe { paths, modulus })
}

fn holder_modulus(p: &SkeletonPath) -> f64 {
    let mut best = 0.0f64;
    for i in 0..p.states.len() {
        for j in i + 1..p.states.len() {
            let d = p.states[i]
                .iter()
                .zip(&p.states[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(d / (p.times[j] - p.times[i]).sqrt());
        }
    }
    best
}

/// Skeleton conjugacy for one control: `sup_t |Theta(g^X_t) - g^Y_t|` and the
/// tolerance it is judged against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkeletonConjugacy {
    pub sup_error: f64,
    /// Step-doubling error estimate of both RK4 integrations.
    pub ode_error: f64,
    /// `T h |grad^2 u| sup |g'|`, the mismatch between the derivative of the
    /// interpolated `u` and the interpolated difference gradient.
    pub interpolation_error: f64,
}

impl SkeletonConjugacy {
    pub fn tolerance(&self) -> f64 {
        self.ode_error + self.interpolation_error
    }
}

fn sup_gap(a: &SkeletonPath, b: &SkeletonPath, stride_b: usize) -> f64 {
    a.states
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let w = &b.states[k * stride_b];
            z.iter().zip(w).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// Integrates the same control on the original and the transformed system
/// and compares `Theta` of the first with the second.
pub fn skeleton_conjugacy(tsde: &TransformedSde, h: &ControlPath, n_steps: usize) -> Result<SkeletonConjugacy, ActionError> {
    let gx = skeleton(&tsde.base, h, n_steps)?;
    let gy = skeleton(tsde, h, n_steps)?;
    let gx2 = skeleton(&tsde.base, h, 2 * n_steps)?;
    let gy2 = skeleton(tsde, h, 2 * n_steps)?;
    let mut sup_error = 0.0f64;
    for (x, y) in gx.states.iter().zip(&gy.states) {
        let tx = tsde.push(x)?;
        sup_error = sup_error.max(tx.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt());
    }
    let ode_error = sup_gap(&gx, &gx2, 2) + sup_gap(&gy, &gy2, 2);
    let dt = h.horizon / n_steps as f64;
    let off = tsde.base.layout.offset();
    let speed = gx
        .states
        .windows(2)
        .map(|w| {
            w[0][off..]
                .iter()
                .zip(&w[1][off..])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / dt
        })
        .fold(0.0, f64::max);
    let interpolation_error = h.horizon * tsde.map.h() * tsde.map.norms[2] * speed;
    Ok(SkeletonConjugacy {
        sup_error,
        ode_error,
        interpolation_error,
    })
}

/// Summary written by the `rate` verb.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub value: f64,
    pub feasibility_residual: f64,
    pub multistart_spread: f64,
    pub n_intervals: usize,
    pub restarts: usize,
    pub converged: bool,
    pub endpoint: Vec<f64>,
    pub minimizer_csv_path: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::registry;

    #[test]
    fn action_examples() {
        assert_eq!(action(&ControlPath::zero(5, 1, 1.0)), 0.0);
        assert_eq!(action(&ControlPath::constant(&[1.0], 7, 2.0)), 1.0);
        let h = ControlPath {
            hdot: vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            m: 2,
            horizon: 1.0,
        };
        assert!((action(&h) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn free_motion_is_a_straight_line() {
        let p = registry::bundled("free-endpoint").unwrap();
        let h = ControlPath::constant(&[0.3, -0.2], 4, p.horizon);
        let s = skeleton(&p, &h, 40).unwrap();
        for (t, z) in s.times.iter().zip(&s.states) {
            assert!((z[0] - p.start[0] - 0.3 * t).abs() < 1e-14);
            assert!((z[1] - p.start[1] + 0.2 * t).abs() < 1e-14);
        }
        let zero = skeleton(&p, &ControlPath::zero(4, 2, p.horizon), 8).unwrap();
        assert!(zero.states.iter().all(|z| z == &p.start));
    }

    #[test]
    fn steps_must_refine_intervals() {
        let p = registry::bundled("ou-1d").unwrap();
        let h = ControlPath::zero(3, 1, p.horizon);
        assert!(matches!(skeleton(&p, &h, 10), Err(ActionError::Steps(10, 3))));
        let h = ControlPath::zero(3, 2, p.horizon);
        assert!(matches!(skeleton(&p, &h, 9), Err(ActionError::ControlShape { .. })));
    }
}
