//! Euler-Maruyama simulation of the original, transformed and degenerate
//! systems with counter-based Gaussian increments.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{Dynamics, DynamicsError};
use crate::model::SdeProblem;
use crate::rng::{brownian_increments, coarsen, fill_step, stream_rng};
use crate::zvonkin::{transform, TransformedSde, ZvonkinError, ZvonkinMap};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("epsilon must lie in [0, 1], got {0}")]
    Epsilon(f64),
    #[error("need at least one time step")]
    Steps,
    #[error("path left the working region at step {step}: {state:?}")]
    Escaped { step: usize, state: Vec<f64> },
    #[error("non-finite state at step {step}: {state:?}")]
    NonFinite { step: usize, state: Vec<f64> },
    #[error("coefficient evaluation failed at step {step}: {source}")]
    Coefficients { step: usize, source: DynamicsError },
    #[error("the degenerate simulator needs a degenerate layout")]
    NotDegenerate,
    #[error("increment buffer has length {got}, expected {want}")]
    Increments { got: usize, want: usize },
    #[error(transparent)]
    Zvonkin(#[from] ZvonkinError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
    pub path: u64,
    pub dt: f64,
    pub epsilon: f64,
    /// Row-major `n_steps x m` increments, when retained.
    pub increments: Option<Vec<f64>>,
}

impl PathSample {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("paths have at least one node")
    }

    /// CSV with header `t,x1..xn`; floats are written round-trip exact.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states[0].len();
        let mut head = vec!["t".to_string()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        w.write_record(&head).map_err(std::io::Error::from)?;
        for (t, z) in self.times.iter().zip(&self.states) {
            let row: Vec<String> = std::iter::once(t).chain(z).map(|v| format!("{v:?}")).collect();
            w.write_record(&row).map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reusable buffers for [`em_step`].
#[derive(Debug, Clone, Default)]
pub struct StepBuffers {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    scratch: Vec<f64>,
}

impl StepBuffers {
    pub fn new(n: usize, m: usize) -> StepBuffers {
        StepBuffers {
            drift: vec![0.0; n],
            sigma: vec![0.0; m * m],
            scratch: Vec::new(),
        }
    }
}

/// One Euler-Maruyama step `z += b dt + sqrt(eps) sigma dw`; the diffusion
/// acts on the noisy block only.
pub fn em_step<D: Dynamics + ?Sized>(
    dynamics: &D,
    eps: f64,
    dt: f64,
    z: &mut [f64],
    dw: &[f64],
    buf: &mut StepBuffers,
) -> Result<(), DynamicsError> {
    let n = z.len();
    let m = dw.len();
    let off = n - m;
    buf.drift.resize(n, 0.0);
    buf.sigma.resize(m * m, 0.0);
    dynamics.eval(eps, z, &mut buf.drift, &mut buf.sigma, &mut buf.scratch)?;
    let s = eps.sqrt();
    for i in 0..n {
        z[i] += buf.drift[i] * dt;
    }
    if s != 0.0 {
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += buf.sigma[i * m + j] * dw[j];
            }
            z[off + i] += s * acc;
        }
    }
    Ok(())
}

fn check_args(eps: f64, n_steps: usize) -> Result<(), SimError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(SimError::Epsilon(eps));
    }
    if n_steps == 0 {
        return Err(SimError::Steps);
    }
    Ok(())
}

/// Source of the increments for a streamed path.
enum Noise<'a> {
    Stream { seed: u64, path: u64 },
    Given(&'a [f64]),
}

/// Runs one path, handing every node `(k, z_k)` to `visit`. Returning
/// `false` from `visit` stops the path early.
fn run<D: Dynamics + ?Sized>(
    dynamics: &D,
    eps: f64,
    n_steps: usize,
    noise: Noise<'_>,
    mut keep: Option<&mut Vec<f64>>,
    mut visit: impl FnMut(usize, &[f64]) -> bool,
) -> Result<(), SimError> {
    check_args(eps, n_steps)?;
    let m = dynamics.noisy_dim();
    let dt = dynamics.horizon() / n_steps as f64;
    let mut z = dynamics.start().to_vec();
    let mut buf = StepBuffers::new(z.len(), m);
    let mut dw = vec![0.0; m];
    let mut rng = match noise {
        Noise::Stream { seed, path } => Some(stream_rng(seed, path)),
        Noise::Given(incs) => {
            if incs.len() != n_steps * m {
                return Err(SimError::Increments {
                    got: incs.len(),
                    want: n_steps * m,
                });
            }
            None
        }
    };
    if !visit(0, &z) {
        return Ok(());
    }
    for k in 0..n_steps {
        match (&mut rng, &noise) {
            (Some(r), _) => fill_step(r, dt, &mut dw),
            (None, Noise::Given(incs)) => dw.copy_from_slice(&incs[k * m..(k + 1) * m]),
            (None, Noise::Stream { .. }) => unreachable!(),
        }
        if let Some(v) = keep.as_deref_mut() {
            v.extend_from_slice(&dw);
        }
        em_step(dynamics, eps, dt, &mut z, &dw, &mut buf).map_err(|source| SimError::Coefficients {
            step: k,
            source,
        })?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite {
                step: k + 1,
                state: z,
            });
        }
        if dynamics.escaped(&z) {
            return Err(SimError::Escaped {
                step: k + 1,
                state: z,
            });
        }
        if !visit(k + 1, &z) {
            break;
        }
    }
    Ok(())
}

/// Streams path `path` of the stream keyed by `seed` through `visit`
/// without storing it.
pub fn stream_path<D: Dynamics + ?Sized>(
    dynamics: &D,
    eps: f64,
    n_steps: usize,
    seed: u64,
    path: u64,
    visit: impl FnMut(usize, &[f64]) -> bool,
) -> Result<(), SimError> {
    run(dynamics, eps, n_steps, Noise::Stream { seed, path }, None, visit)
}

fn collect<D: Dynamics + ?Sized>(
    dynamics: &D,
    eps: f64,
    n_steps: usize,
    noise: Noise<'_>,
    retain: bool,
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>), SimError> {
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut keep = retain.then(Vec::new);
    run(dynamics, eps, n_steps, noise, keep.as_mut(), |_, z| {
        states.push(z.to_vec());
        true
    })?;
    Ok((states, keep))
}

fn sample(horizon: f64, n_steps: usize, seed: u64, path: u64, eps: f64, states: Vec<Vec<f64>>, incs: Option<Vec<f64>>) -> PathSample {
    let dt = horizon / n_steps as f64;
    let times = (0..=n_steps)
        .map(|k| if k == n_steps { horizon } else { k as f64 * dt })
        .collect();
    PathSample {
        times,
        states,
        seed,
        path,
        dt,
        epsilon: eps,
        increments: incs,
    }
}

/// Path `path` of the stream keyed by `seed`, increments retained.
pub fn simulate_path<D: Dynamics + ?Sized>(
    dynamics: &D,
    eps: f64,
    n_steps: usize,
    seed: u64,
    path: u64,
) -> Result<PathSample, SimError> {
    let (states, incs) = collect(dynamics, eps, n_steps, Noise::Stream { seed, path }, true)?;
    Ok(sample(dynamics.horizon(), n_steps, seed, path, eps, states, incs))
}

/// Path driven by the given row-major increments.
pub fn simulate_with_increments<D: Dynamics + ?Sized>(
    dynamics: &D,
    eps: f64,
    n_steps: usize,
    increments: &[f64],
) -> Result<PathSample, SimError> {
    let (states, _) = collect(dynamics, eps, n_steps, Noise::Given(increments), false)?;
    let mut s = sample(dynamics.horizon(), n_steps, 0, 0, eps, states, None);
    s.increments = Some(increments.to_vec());
    Ok(s)
}

pub fn simulate_original(problem: &SdeProblem, eps: f64, n_steps: usize, seed: u64) -> Result<PathSample, SimError> {
    simulate_path(problem, eps, n_steps, seed, 0)
}

pub fn simulate_transformed(tsde: &TransformedSde, eps: f64, n_steps: usize, seed: u64) -> Result<PathSample, SimError> {
    simulate_path(tsde, eps, n_steps, seed, 0)
}

pub fn simulate_degenerate(problem: &SdeProblem, eps: f64, n_steps: usize, seed: u64) -> Result<PathSample, SimError> {
    if !problem.layout.is_degenerate() {
        return Err(SimError::NotDegenerate);
    }
    simulate_path(problem, eps, n_steps, seed, 0)
}

/// Per-path `sup_k |theta(X_k) - Y_k|` with shared increments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conjugacy {
    pub n_steps: usize,
    pub n_paths: usize,
    pub mean: f64,
    pub max: f64,
}

/// Simulates `X` and `Y = theta(X)` with the same increments on paths
/// `0..n_paths` and reports the mean and max of the sup discrepancy.
pub fn conjugacy_check(
    problem: &SdeProblem,
    map: Arc<ZvonkinMap>,
    eps: f64,
    n_steps: usize,
    seed: u64,
    n_paths: usize,
) -> Result<Conjugacy, SimError> {
    let tsde = transform(problem, map)?;
    let m = problem.noisy_dim();
    let dt = problem.horizon / n_steps as f64;
    let per_path: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let incs = brownian_increments(seed, p, n_steps, m, dt);
            conjugacy_gap(problem, &tsde, eps, n_steps, &incs)
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize(n_steps, &per_path))
}

/// Same check on one fine increment stream at several resolutions:
/// `n_steps * 2^j` for `j = 0..levels`, all coupled to the finest level.
pub fn conjugacy_refinement(
    problem: &SdeProblem,
    map: Arc<ZvonkinMap>,
    eps: f64,
    n_steps: usize,
    levels: usize,
    seed: u64,
    n_paths: usize,
) -> Result<Vec<Conjugacy>, SimError> {
    let tsde = transform(problem, map)?;
    let m = problem.noisy_dim();
    let finest = n_steps << (levels - 1);
    let dt = problem.horizon / finest as f64;
    let gaps: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let fine = brownian_increments(seed, p, finest, m, dt);
            (0..levels)
                .map(|j| {
                    let incs = coarsen(&fine, m, 1 << (levels - 1 - j));
                    conjugacy_gap(problem, &tsde, eps, n_steps << j, &incs)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok((0..levels)
        .map(|j| {
            let col: Vec<f64> = gaps.iter().map(|g| g[j]).collect();
            summarize(n_steps << j, &col)
        })
        .collect())
}

fn conjugacy_gap(problem: &SdeProblem, tsde: &TransformedSde, eps: f64, n_steps: usize, incs: &[f64]) -> Result<f64, SimError> {
    let x = simulate_with_increments(problem, eps, n_steps, incs)?;
    let y = simulate_with_increments(tsde, eps, n_steps, incs)?;
    let mut sup = 0.0f64;
    for (a, b) in x.states.iter().zip(&y.states) {
        let ta = tsde.push(a)?;
        let d = ta.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        sup = sup.max(d);
    }
    Ok(sup)
}

fn summarize(n_steps: usize, v: &[f64]) -> Conjugacy {
    Conjugacy {
        n_steps,
        n_paths: v.len(),
        mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
        max: v.iter().copied().fold(0.0, f64::max),
    }
}

/// Outcome of a batch: stored paths for the first `keep` indices plus escape
/// and failure counts.
#[derive(Debug, Clone)]
pub struct Batch {
    pub paths: Vec<PathSample>,
    pub escapes: usize,
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub n_paths: usize,
    pub epsilon: f64,
    pub dt: f64,
    pub escapes: usize,
    pub wall_time: f64,
}

/// Simulates paths `0..n_paths` in parallel; results are in path order.
pub fn simulate_batch<D: Dynamics + ?Sized>(
    dynamics: &D,
    eps: f64,
    n_steps: usize,
    seed: u64,
    n_paths: usize,
) -> Result<Batch, SimError> {
    check_args(eps, n_steps)?;
    let results: Vec<Result<PathSample, SimError>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| simulate_path(dynamics, eps, n_steps, seed, p))
        .collect();
    let mut batch = Batch {
        paths: Vec::new(),
        escapes: 0,
        failures: Vec::new(),
    };
    for (p, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => batch.paths.push(s),
            Err(SimError::Escaped { .. }) => batch.escapes += 1,
            Err(e) => batch.failures.push((p as u64, e.to_string())),
        }
    }
    Ok(batch)
}

/// Writes `path_<i>.csv` for every stored path.
pub fn write_paths(dir: &Path, paths: &[PathSample]) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    for s in paths {
        let f = std::fs::File::create(dir.join(format!("path_{:06}.csv", s.path)))?;
        s.write_csv(std::io::BufWriter::new(f))?;
    }
    Ok(())
}
