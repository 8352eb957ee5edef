use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{action, skeleton_endpoint, ActionError, ControlPath, Target};
use crate::dynamics::Dynamics;
use crate::model::{Region, SdeProblem};
use crate::rng::{derive_seed, normal_pair, stream_rng};
use crate::zvonkin::{transform, ZvonkinMap};

#[derive(Debug, Clone, PartialEq)]
pub struct RateOptions {
    /// RK4 steps per control interval.
    pub steps_per_interval: usize,
    /// Penalty weights, one BFGS stage each.
    pub penalties: Vec<f64>,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Relative step of the central differences.
    pub fd_step: f64,
    /// Terminal residual accepted as feasible.
    pub feas_tol: f64,
    /// Scale of the random restart perturbations.
    pub perturbation: f64,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions {
            steps_per_interval: 8,
            penalties: vec![10.0, 100.0, 1000.0, 10000.0],
            max_iters: 200,
            grad_tol: 1e-9,
            fd_step: 1e-5,
            feas_tol: 1e-8,
            perturbation: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    pub value: f64,
    pub minimizer: ControlPath,
    pub endpoint: Vec<f64>,
    /// Max minus min value over the feasible restarts.
    pub multistart_spread: f64,
    pub converged: bool,
    pub feasibility_residual: f64,
    /// Value per restart, `None` where the restart found no feasible control.
    pub restart_values: Vec<Option<f64>>,
}

/// Result of a BFGS run.
#[derive(Debug, Clone)]
pub struct Bfgs {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iters: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// BFGS with Armijo backtracking. `f` returns `None` where the objective is
/// undefined, which the line search treats as `+inf`; `fg` returns the value
/// and gradient.
pub fn bfgs(
    f: &dyn Fn(&[f64]) -> Option<f64>,
    fg: &dyn Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: &[f64],
    max_iters: usize,
    grad_tol: f64,
) -> Option<Bfgs> {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g) = fg(x.as_slice())?;
    let mut g = DVector::from_vec(g);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut stalls = 0;
    for it in 0..max_iters {
        if g.amax() <= grad_tol * fx.abs().max(1.0) {
            return Some(Bfgs {
                x: x.as_slice().to_vec(),
                fx,
                iters: it,
                converged: true,
            });
        }
        let mut p = -(&hinv * &g);
        let mut slope = p.dot(&g);
        if slope >= 0.0 {
            hinv = DMatrix::identity(n, n);
            p = -g.clone();
            slope = p.dot(&g);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + alpha * &p;
            if let Some(ft) = f(trial.as_slice()) {
                if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(xn) = accepted else {
            break;
        };
        let (fn_, gn) = fg(xn.as_slice())?;
        let gn = DVector::from_vec(gn);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            if first {
                hinv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += ((1.0 + rho * yhy) * rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        let rel = (fx - fn_).abs() / fx.abs().max(1e-12);
        stalls = if rel < 1e-14 { stalls + 1 } else { 0 };
        x = xn;
        fx = fn_;
        g = gn;
        if stalls >= 3 {
            break;
        }
    }
    let converged = g.amax() <= grad_tol * fx.abs().max(1.0) * 1e3;
    Some(Bfgs {
        x: x.as_slice().to_vec(),
        fx,
        iters: max_iters,
        converged,
    })
}

struct Problem<'a, D: Dynamics + ?Sized> {
    d: &'a D,
    target: &'a Target,
    m: usize,
    horizon: f64,
    n_steps: usize,
    fd_step: f64,
}

impl<D: Dynamics + ?Sized> Problem<'_, D> {
    fn control(&self, hdot: &[f64]) -> ControlPath {
        ControlPath {
            hdot: hdot.to_vec(),
            m: self.m,
            horizon: self.horizon,
        }
    }

    fn residual(&self, hdot: &[f64]) -> Result<Vec<f64>, ActionError> {
        let z = skeleton_endpoint(self.d, &self.control(hdot), self.n_steps)?;
        self.target.residual(&z)
    }

    /// Residual and its central-difference Jacobian (row-major `r x D`),
    /// one-sided where a perturbed skeleton fails.
    fn jacobian(&self, hdot: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ActionError> {
        let r0 = self.residual(hdot)?;
        let (r, dn) = (r0.len(), hdot.len());
        let mut jac = vec![0.0; r * dn];
        let mut x = hdot.to_vec();
        for j in 0..dn {
            let step = self.fd_step * hdot[j].abs().max(1.0);
            x[j] = hdot[j] + step;
            let up = self.residual(&x).ok();
            x[j] = hdot[j] - step;
            let down = self.residual(&x).ok();
            x[j] = hdot[j];
            let (a, b, w) = match (&up, &down) {
                (Some(a), Some(b)) => (a, b, 2.0 * step),
                (Some(a), None) => (a, &r0, step),
                (None, Some(b)) => (&r0, b, step),
                (None, None) => continue,
            };
            for i in 0..r {
                jac[i * dn + j] = (a[i] - b[i]) / w;
            }
        }
        Ok((r0, jac))
    }

    fn penalized(&self, mu: f64, hdot: &[f64]) -> Option<f64> {
        let r = self.residual(hdot).ok()?;
        Some(action(&self.control(hdot)) + mu * r.iter().map(|v| v * v).sum::<f64>())
    }

    fn penalized_grad(&self, mu: f64, hdot: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (r, jac) = self.jacobian(hdot).ok()?;
        let dt = self.horizon * self.m as f64 / hdot.len() as f64;
        let dn = hdot.len();
        let mut g: Vec<f64> = hdot.iter().map(|v| v * dt).collect();
        for (i, ri) in r.iter().enumerate() {
            for j in 0..dn {
                g[j] += 2.0 * mu * ri * jac[i * dn + j];
            }
        }
        let f = action(&self.control(hdot)) + mu * r.iter().map(|v| v * v).sum::<f64>();
        Some((f, g))
    }

    /// Gauss-Newton minimal-norm steps `h -= J^T (J J^T)^{-1} R` onto the
    /// constraint set.
    fn project(&self, hdot: &mut Vec<f64>, tol: f64) -> f64 {
        let mut best = self.residual(hdot).map(|r| norm(&r)).unwrap_or(f64::INFINITY);
        for _ in 0..30 {
            if best <= tol {
                break;
            }
            let Ok((r, jac)) = self.jacobian(hdot) else {
                break;
            };
            let dn = hdot.len();
            let j = DMatrix::from_row_slice(r.len(), dn, &jac);
            let jjt = &j * j.transpose() + DMatrix::identity(r.len(), r.len()) * 1e-14;
            let Some(sol) = jjt.lu().solve(&DVector::from_vec(r)) else {
                break;
            };
            let step = j.transpose() * sol;
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..20 {
                let trial: Vec<f64> = hdot.iter().zip(step.iter()).map(|(h, s)| h - t * s).collect();
                if let Ok(rt) = self.residual(&trial) {
                    let nr = norm(&rt);
                    if nr < best {
                        *hdot = trial;
                        best = nr;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        best
    }
}

struct Run {
    hdot: Vec<f64>,
    value: f64,
    residual: f64,
    converged: bool,
}

fn run_from<D: Dynamics + ?Sized>(pb: &Problem<'_, D>, x0: Vec<f64>, opts: &RateOptions) -> Option<Run> {
    let mut x = x0;
    pb.residual(&x).ok()?;
    let mut converged = false;
    for &mu in &opts.penalties {
        let f = |h: &[f64]| pb.penalized(mu, h);
        let fg = |h: &[f64]| pb.penalized_grad(mu, h);
        let out = bfgs(&f, &fg, &x, opts.max_iters, opts.grad_tol)?;
        x = out.x;
        converged = out.converged;
    }
    let residual = pb.project(&mut x, opts.feas_tol);
    Some(Run {
        value: action(&pb.control(&x)),
        hdot: x,
        residual,
        converged,
    })
}

fn starting_controls<D: Dynamics + ?Sized>(
    d: &D,
    target: &Target,
    n_intervals: usize,
    restarts: usize,
    seed: u64,
    opts: &RateOptions,
) -> Result<Vec<Vec<f64>>, ActionError> {
    let m = d.noisy_dim();
    let dn = n_intervals * m;
    let start = d.start();
    let off = start.len() - m;
    let teleport = match target.anchor(start)? {
        Some(a) => {
            let mut drift = vec![0.0; start.len()];
            let mut sigma = vec![0.0; m * m];
            d.eval(0.0, start, &mut drift, &mut sigma, &mut Vec::new())?;
            let s = DMatrix::from_row_slice(m, m, &sigma);
            let gap = DVector::from_iterator(m, (0..m).map(|i| (a[off + i] - start[off + i]) / d.horizon()));
            s.lu().solve(&gap).map(|v| v.as_slice().repeat(n_intervals))
        }
        None => None,
    };
    let mut out = vec![vec![0.0; dn]];
    if let Some(t) = &teleport {
        out.push(t.clone());
    }
    let base = teleport.unwrap_or_else(|| vec![0.0; dn]);
    let scale = opts.perturbation * (norm(&base) / (dn as f64).sqrt()).max(1.0);
    let mut r = 0u64;
    while out.len() < restarts {
        let mut rng = stream_rng(derive_seed(seed, r), 0);
        let mut h = base.clone();
        for pair in h.chunks_mut(2) {
            let (a, b) = normal_pair(&mut rng);
            pair[0] += scale * a;
            if pair.len() > 1 {
                pair[1] += scale * b;
            }
        }
        out.push(h);
        r += 1;
    }
    out.truncate(restarts.max(1));
    Ok(out)
}

/// Minimum action over piecewise-constant controls whose skeleton endpoint
/// satisfies `target`: penalty continuation with BFGS, a feasibility
/// projection, and multistart from the zero control, the straight-line
/// control towards the target and random perturbations of it.
pub fn minimize_rate<D: Dynamics + ?Sized>(
    d: &D,
    target: &Target,
    n_intervals: usize,
    restarts: usize,
    seed: u64,
    opts: &RateOptions,
) -> Result<RateResult, ActionError> {
    if restarts == 0 || n_intervals == 0 || opts.steps_per_interval == 0 {
        return Err(ActionError::Invalid("restarts, intervals and steps must be positive".into()));
    }
    if target.dim() != d.dim() {
        return Err(ActionError::TargetShape {
            got: target.dim(),
            want: d.dim(),
        });
    }
    let pb = Problem {
        d,
        target,
        m: d.noisy_dim(),
        horizon: d.horizon(),
        n_steps: n_intervals * opts.steps_per_interval,
        fd_step: opts.fd_step,
    };
    let starts = starting_controls(d, target, n_intervals, restarts, seed, opts)?;
    let runs: Vec<Option<Run>> = starts.into_par_iter().map(|x0| run_from(&pb, x0, opts)).collect();
    let accept = 10.0 * opts.feas_tol;
    let feasible = |r: &Run| r.residual <= accept;
    let restart_values: Vec<Option<f64>> = runs
        .iter()
        .map(|r| r.as_ref().filter(|r| feasible(r)).map(|r| r.value))
        .collect();
    let best = runs
        .iter()
        .flatten()
        .filter(|r| feasible(r))
        .min_by(|a, b| a.value.total_cmp(&b.value));
    let Some(best) = best else {
        let best_residual = runs.iter().flatten().map(|r| r.residual).fold(f64::INFINITY, f64::min);
        return Err(ActionError::Infeasible { best_residual });
    };
    let vals: Vec<f64> = restart_values.iter().flatten().copied().collect();
    let spread = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) - vals.iter().copied().fold(f64::INFINITY, f64::min);
    let minimizer = pb.control(&best.hdot);
    let endpoint = skeleton_endpoint(d, &minimizer, pb.n_steps)?;
    Ok(RateResult {
        value: action(&minimizer),
        minimizer,
        endpoint,
        multistart_spread: spread,
        converged: best.converged,
        feasibility_residual: best.residual,
        restart_values,
    })
}

/// The rate computed on the transformed system, with the target region
/// pulled back through `Theta`.
pub fn rate_via_transform(
    problem: &SdeProblem,
    map: Arc<ZvonkinMap>,
    region: &Region,
    n_intervals: usize,
    restarts: usize,
    seed: u64,
    opts: &RateOptions,
) -> Result<RateResult, ActionError> {
    let tsde = Arc::new(transform(problem, map)?);
    let target = Target::Pullback {
        region: region.clone(),
        tsde: tsde.clone(),
    };
    minimize_rate(tsde.as_ref(), &target, n_intervals, restarts, seed, opts)
}
