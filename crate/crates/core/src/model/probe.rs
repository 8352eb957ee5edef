//! Sampled regularity probes. Each sampled point or pair `i` draws from its own
//! stream `(seed, i)`, so results do not depend on evaluation order.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use super::expr::EvalError;
use super::field::{Shape, VectorField};
use super::geometry::Bounds;
use super::modulus::{default_cutoffs, dini_classify, probe_slow_variation, DiniVerdict, Modulus};
use super::problem::SdeProblem;
use super::ModelError;
use crate::rng::stream_rng;

/// Pairs below this separation are skipped by the ratio probes.
const MIN_SEPARATION: f64 = 1e-12;

/// Pair `i` of the probe design on `bounds`: even indices are independent
/// uniform pairs, odd indices are close pairs at log-uniform separation.
pub fn sample_pair(bounds: &Bounds, seed: u64, i: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream_rng(seed, i);
    let x = bounds.sample(&mut rng);
    if i % 2 == 0 {
        let y = bounds.sample(&mut rng);
        return (x, y);
    }
    let dir: Vec<f64> = (0..bounds.dim())
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let sep = bounds.diameter() * 10f64.powf(-5.0 * rng.random::<f64>());
    let y = x
        .iter()
        .zip(&dir)
        .enumerate()
        .map(|(k, (a, d))| (a + sep * d / norm).clamp(bounds.lo[k], bounds.hi[k]))
        .collect();
    (x, y)
}

pub fn sample_pairs(bounds: &Bounds, n_pairs: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..n_pairs as u64).map(|i| sample_pair(bounds, seed, i)).collect()
}

/// Box center, corners (up to dimension 10) and `n_points` uniform samples.
pub fn sample_points(bounds: &Bounds, n_points: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut pts = vec![bounds.center()];
    let n = bounds.dim();
    if n <= 10 {
        for mask in 0..(1usize << n) {
            pts.push(
                (0..n)
                    .map(|k| if mask >> k & 1 == 1 { bounds.hi[k] } else { bounds.lo[k] })
                    .collect(),
            );
        }
    }
    pts.extend((0..n_points as u64).map(|i| bounds.sample(&mut stream_rng(seed, i))));
    pts
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Largest `|f(x) - f(y)| / |x - y|` over the given pairs.
pub fn lipschitz_over_pairs<F>(f: F, out_len: usize, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, EvalError>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), EvalError>,
{
    let mut fx = vec![0.0; out_len];
    let mut fy = vec![0.0; out_len];
    let mut best = 0.0f64;
    for (x, y) in pairs {
        let d = dist(x, y);
        if d < MIN_SEPARATION {
            continue;
        }
        f(x, &mut fx)?;
        f(y, &mut fy)?;
        best = best.max(dist(&fx, &fy) / d);
    }
    Ok(best)
}

/// Sampled lower bound on the Lipschitz constant of `f` on `bounds`.
pub fn probe_lipschitz(f: &VectorField, bounds: &Bounds, n_pairs: usize, seed: u64) -> Result<f64, EvalError> {
    let pairs = sample_pairs(bounds, n_pairs, seed);
    lipschitz_over_pairs(|x, o| f.eval(x, o), f.out_len(), &pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Ellipticity {
    Pass { min_eigenvalue: f64, max_eigenvalue: f64 },
    Fail { witness: Vec<f64>, eigenvalue: f64 },
}

impl Ellipticity {
    pub fn passed(&self) -> bool {
        matches!(self, Ellipticity::Pass { .. })
    }
}

/// Eigenvalues of `sigma sigma^T` for a row-major square matrix.
pub fn gram_eigenvalues(sigma: &[f64], n: usize) -> Vec<f64> {
    let s = DMatrix::from_row_slice(n, n, sigma);
    let g = &s * s.transpose();
    g.symmetric_eigenvalues().iter().copied().collect()
}

/// Checks `K^-1 I <= sigma sigma^T <= K I` at sampled points.
pub fn probe_ellipticity(
    sigma: &VectorField,
    k: f64,
    bounds: &Bounds,
    n_points: usize,
    seed: u64,
) -> Result<Ellipticity, ModelError> {
    let n = match sigma.shape {
        Shape::Matrix(n) => n,
        Shape::Vector(_) => return Err(ModelError::Shape("ellipticity needs a square matrix field".into())),
    };
    let tol = 1e-9;
    let (lo, hi) = (1.0 / k, k);
    let mut out = vec![0.0; n * n];
    let (mut min_e, mut max_e) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut worst: Option<(Vec<f64>, f64, f64)> = None;
    for x in sample_points(bounds, n_points, seed) {
        sigma.eval(&x, &mut out)?;
        for e in gram_eigenvalues(&out, n) {
            min_e = min_e.min(e);
            max_e = max_e.max(e);
            let violation = (lo - e).max(e - hi);
            if violation > tol && worst.as_ref().is_none_or(|w| violation > w.2) {
                worst = Some((x.clone(), e, violation));
            }
        }
    }
    Ok(match worst {
        Some((witness, eigenvalue, _)) => Ellipticity::Fail { witness, eigenvalue },
        None => Ellipticity::Pass {
            min_eigenvalue: min_e,
            max_eigenvalue: max_e,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ModulusCheck {
    /// `worst_ratio` is the largest `|f(x)-f(y)| / phi(|x-y|)` seen.
    Pass { worst_ratio: f64 },
    Fail { x: Vec<f64>, y: Vec<f64>, increment: f64, bound: f64 },
}

impl ModulusCheck {
    pub fn passed(&self) -> bool {
        matches!(self, ModulusCheck::Pass { .. })
    }
}

/// Checks `|f(x) - f(y)| <= phi(|x - y|) (1 + 1e-6)` on sampled pairs.
pub fn probe_modulus(
    f: &VectorField,
    m: &Modulus,
    bounds: &Bounds,
    n_pairs: usize,
    seed: u64,
) -> Result<ModulusCheck, ModelError> {
    let mut fx = vec![0.0; f.out_len()];
    let mut fy = vec![0.0; f.out_len()];
    let mut worst = 0.0f64;
    let mut witness: Option<(f64, Vec<f64>, Vec<f64>, f64, f64)> = None;
    for (x, y) in sample_pairs(bounds, n_pairs, seed) {
        let d = dist(&x, &y);
        if d < MIN_SEPARATION {
            continue;
        }
        f.eval(&x, &mut fx)?;
        f.eval(&y, &mut fy)?;
        let inc = dist(&fx, &fy);
        let bound = m.eval(d)?;
        if inc > bound * (1.0 + 1e-6) {
            let ratio = if bound > 0.0 { inc / bound } else { f64::INFINITY };
            if witness.as_ref().is_none_or(|(r, ..)| ratio > *r) {
                witness = Some((ratio, x.clone(), y.clone(), inc, bound));
            }
        } else if bound > 0.0 {
            worst = worst.max(inc / bound);
        }
    }
    Ok(match witness {
        Some((_, x, y, increment, bound)) => ModulusCheck::Fail { x, y, increment, bound },
        None => ModulusCheck::Pass { worst_ratio: worst },
    })
}

/// Sampled `sup |b1^eps - b1^0|` on `bounds` (full state).
pub fn drift_family_limit_gap(
    problem: &SdeProblem,
    eps: f64,
    bounds: &Bounds,
    n_points: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let Some(p) = &problem.perturbation else {
        return Ok(0.0);
    };
    let s = p.scale(eps);
    let mut out = vec![0.0; p.field.out_len()];
    let mut best = 0.0f64;
    for x in sample_points(bounds, n_points, seed) {
        p.field.eval(&x, &mut out)?;
        best = best.max(s * norm(&out));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Reported but never gating.
    Advisory,
}

/// One row of the validation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub assumption: String,
    pub verdict: Verdict,
    pub witness: Option<String>,
    pub value: Option<f64>,
}

impl CheckRow {
    fn new(assumption: impl Into<String>, verdict: Verdict, value: Option<f64>, witness: Option<String>) -> Self {
        CheckRow {
            assumption: assumption.into(),
            verdict,
            witness,
            value,
        }
    }

    fn gate(assumption: impl Into<String>, ok: bool, value: f64, witness: impl FnOnce() -> String) -> Self {
        let (verdict, witness) = if ok {
            (Verdict::Pass, None)
        } else {
            (Verdict::Fail, Some(witness()))
        };
        Self::new(assumption, verdict, Some(value), witness)
    }
}

#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub n_pairs: usize,
    pub n_points: usize,
    pub seed: u64,
    pub eps_ladder: Vec<f64>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions {
            n_pairs: 4000,
            n_points: 1000,
            seed: 0,
            eps_ladder: vec![0.5, 0.25, 0.125],
        }
    }
}

/// True when every gating row passed.
pub fn all_pass(rows: &[CheckRow]) -> bool {
    rows.iter().all(|r| r.verdict != Verdict::Fail)
}

fn sup_norm<F>(f: F, out_len: usize, pts: &[Vec<f64>]) -> Result<(f64, Vec<f64>), EvalError>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), EvalError>,
{
    let mut out = vec![0.0; out_len];
    let mut best = (0.0, pts[0].clone());
    for x in pts {
        f(x, &mut out)?;
        let v = norm(&out);
        if v > best.0 {
            best = (v, x.clone());
        }
    }
    Ok(best)
}

/// Runs every applicable assumption probe on the working box.
pub fn validate_problem(problem: &SdeProblem, opts: &ValidateOptions) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    if let Err(e) = validate_into(problem, opts, &mut rows) {
        rows.push(CheckRow::new("evaluation", Verdict::Fail, None, Some(e.to_string())));
    }
    rows
}

fn validate_into(problem: &SdeProblem, opts: &ValidateOptions, rows: &mut Vec<CheckRow>) -> Result<(), ModelError> {
    let degenerate = problem.layout.is_degenerate();
    let tag = |a: &str, h: &str| if degenerate { h.to_string() } else { a.to_string() };
    let n = problem.dim();
    let m = problem.noisy_dim();
    let off = problem.layout.offset();
    let full = &problem.working_box;
    let noisy = full.slice(off..n);
    let k = problem.ellipticity_k;
    let pts = sample_points(full, opts.n_points, opts.seed);
    let noisy_pts = sample_points(&noisy, opts.n_points, opts.seed);
    let pairs = sample_pairs(full, opts.n_pairs, opts.seed);
    let mut tmp = vec![0.0; n];

    // Lipschitz constants of the drift family and of sigma.
    let mut eps_all = vec![0.0];
    eps_all.extend(&opts.eps_ladder);
    let lip_bound = if degenerate { Some(k) } else { problem.lipschitz_l };
    let mut lip_drift = 0.0f64;
    for &eps in &eps_all {
        let l = if degenerate {
            // |db| + |dB| as in the block form of the assumption
            let mut best = 0.0f64;
            let (mut fx, mut fy, mut t) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for (x, y) in &pairs {
                let d = dist(x, y);
                if d < MIN_SEPARATION {
                    continue;
                }
                problem.eval_b1(eps, x, &mut fx, &mut t)?;
                problem.eval_b1(eps, y, &mut fy, &mut t)?;
                let a = dist(&fx[..off], &fy[..off]);
                let b = dist(&fx[off..], &fy[off..]);
                best = best.max((a + b) / d);
            }
            best
        } else {
            lipschitz_over_pairs(|x, o| problem.eval_b1(eps, x, o, &mut vec![0.0; n]), n, &pairs)?
        };
        lip_drift = lip_drift.max(l);
    }
    let lip_sigma = probe_lipschitz(&problem.diffusion, &noisy, opts.n_pairs, opts.seed)?;
    match lip_bound {
        Some(l) => {
            rows.push(CheckRow::gate(tag("(A1) Lipschitz drift", "(H1) Lipschitz drift"), lip_drift <= l * (1.0 + 1e-9), lip_drift, || {
                format!("sampled ratio {lip_drift:.6} exceeds {l}")
            }));
            rows.push(CheckRow::gate(tag("(A1) Lipschitz sigma", "(H1) Lipschitz sigma"), lip_sigma <= l * (1.0 + 1e-9), lip_sigma, || {
                format!("sampled ratio {lip_sigma:.6} exceeds {l}")
            }));
        }
        None => {
            rows.push(CheckRow::new("(A1) Lipschitz drift", Verdict::Advisory, Some(lip_drift), Some("no lipschitz_l declared".into())));
            rows.push(CheckRow::new("(A1) Lipschitz sigma", Verdict::Advisory, Some(lip_sigma), Some("no lipschitz_l declared".into())));
        }
    }
    if degenerate {
        let l0 = lipschitz_over_pairs(|x, o| problem.drift_limit.eval(x, o), n, &pairs)?;
        rows.push(CheckRow::new("(H2) Lipschitz limit drift", Verdict::Advisory, Some(l0), None));
    }

    // Sup-norm convergence of the perturbation family.
    let gaps: Vec<f64> = opts
        .eps_ladder
        .iter()
        .map(|&e| drift_family_limit_gap(problem, e, full, opts.n_points, opts.seed))
        .collect::<Result<_, _>>()?;
    let shrinking = gaps.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
        && (gaps.first().copied().unwrap_or(0.0) <= 1e-12
            || gaps.last().copied().unwrap_or(0.0) < 0.75 * gaps[0]);
    let last_gap = gaps.last().copied().unwrap_or(0.0);
    rows.push(CheckRow::gate(tag("(A1) drift limit gap", "(H2) drift limit gap"), shrinking, last_gap, || {
        format!("gaps along eps ladder {:?}: {gaps:?}", opts.eps_ladder)
    }));

    // Sup bounds.
    let (b2_sup, b2_at) = sup_norm(|x, o| problem.singular.eval(x, o), m, &noisy_pts)?;
    let mut drift_sup = (0.0f64, pts[0].clone());
    let mut out = vec![0.0; n];
    for &eps in &eps_all {
        for x in &pts {
            problem.eval_b1(eps, x, &mut out, &mut tmp)?;
            let v = if degenerate { norm(&out[off..]) } else { norm(&out) };
            if v > drift_sup.0 {
                drift_sup = (v, x.clone());
            }
        }
    }
    let total = drift_sup.0 + b2_sup;
    rows.push(CheckRow::gate(tag("(A1') sup bound", "(H1) sup bound"), total <= k, total, || {
        format!("drift {:.4} at {:?} plus singular {:.4} at {:?} exceeds K = {k}", drift_sup.0, drift_sup.1, b2_sup, b2_at)
    }));
    if let Some(b) = problem.singular.declared_bound {
        rows.push(CheckRow::gate("declared bound of singular drift", b2_sup <= b * (1.0 + 1e-12), b2_sup, || {
            format!("|b2| = {b2_sup} at {b2_at:?} exceeds declared {b}")
        }));
    }

    // Ellipticity.
    let ell = probe_ellipticity(&problem.diffusion, k, &noisy, opts.n_points, opts.seed)?;
    let row = match &ell {
        Ellipticity::Pass { min_eigenvalue, max_eigenvalue } => CheckRow::new(
            tag("(A1') ellipticity", "(H1) ellipticity"),
            Verdict::Pass,
            Some(*max_eigenvalue),
            Some(format!("eigenvalues in [{min_eigenvalue:.6}, {max_eigenvalue:.6}]")),
        ),
        Ellipticity::Fail { witness, eigenvalue } => CheckRow::new(
            tag("(A1') ellipticity", "(H1) ellipticity"),
            Verdict::Fail,
            Some(*eigenvalue),
            Some(format!("eigenvalue {eigenvalue} outside [1/K, K] at {witness:?}")),
        ),
    };
    rows.push(row);

    // Modulus of the singular drift.
    let mc = probe_modulus(&problem.singular, &problem.modulus, &noisy, opts.n_pairs, opts.seed)?;
    rows.push(match &mc {
        ModulusCheck::Pass { worst_ratio } => {
            CheckRow::new(tag("(A2) modulus of b2", "(H3) modulus of b"), Verdict::Pass, Some(*worst_ratio), None)
        }
        ModulusCheck::Fail { x, y, increment, bound } => CheckRow::new(
            tag("(A2) modulus of b2", "(H3) modulus of b"),
            Verdict::Fail,
            Some(*increment),
            Some(format!("|b(x)-b(y)| = {increment} > phi = {bound} at x = {x:?}, y = {y:?}")),
        ),
    });
    let dini = dini_classify(&problem.modulus, &default_cutoffs())?;
    rows.push(match dini.verdict {
        DiniVerdict::Finite { value } => CheckRow::new(tag("(A2) Dini integral", "(H3) Dini integral"), Verdict::Pass, Some(value), None),
        DiniVerdict::Divergent => CheckRow::new(
            tag("(A2) Dini integral", "(H3) Dini integral"),
            Verdict::Fail,
            None,
            Some("integral of phi(s)/s over (0,1) diverges".into()),
        ),
    });
    let slow = probe_slow_variation(&problem.modulus)?;
    rows.push(CheckRow::new(
        "slow variation (advisory)",
        Verdict::Advisory,
        Some(slow.final_deviation),
        Some(format!(
            "|phi(dt)/phi(t) - 1| at the smallest probed t; trending to one: {}",
            slow.trending_to_one
        )),
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::field::parse_field;

    #[test]
    fn lipschitz_of_identity_and_linear() {
        let id = parse_field("x1; x2", 2, 2).unwrap();
        let b = Bounds::cube(2, -5.0, 5.0);
        let l = probe_lipschitz(&id, &b, 200, 1).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
        let a = VectorField::linear(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let l = probe_lipschitz(&a, &b, 4000, 1).unwrap();
        assert!(l <= 2.0 + 1e-9 && l > 1.99, "{l}");
    }

    #[test]
    fn lipschitz_of_sine() {
        let f = parse_field("sin(x1)", 1, 1).unwrap();
        let l = probe_lipschitz(&f, &Bounds::cube(1, -5.0, 5.0), 4000, 3).unwrap();
        assert!(l > 0.99 && l <= 1.0 + 1e-9, "{l}");
    }

    #[test]
    fn ellipticity_examples() {
        let b = Bounds::cube(2, -5.0, 5.0);
        let id = VectorField::scaled_identity(2, 1.0);
        assert!(probe_ellipticity(&id, 2.0, &b, 50, 0).unwrap().passed());
        let d = VectorField::parse("3; 0; 0; 1", vec!["x1".into(), "x2".into()], Shape::Matrix(2)).unwrap();
        match probe_ellipticity(&d, 2.0, &b, 50, 0).unwrap() {
            Ellipticity::Fail { eigenvalue, .. } => assert!((eigenvalue - 9.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        let s = VectorField::parse(
            "1 + 0.1*tanh(x1); 0; 0; 1 + 0.1*tanh(x1)",
            vec!["x1".into(), "x2".into()],
            Shape::Matrix(2),
        )
        .unwrap();
        assert!(probe_ellipticity(&s, 2.0, &b, 200, 0).unwrap().passed());
        let v = parse_field("x1", 1, 1).unwrap();
        assert!(probe_ellipticity(&v, 2.0, &Bounds::cube(1, 0.0, 1.0), 5, 0).is_err());
    }

    #[test]
    fn modulus_examples() {
        let h = Modulus::Holder { alpha: 0.5 };
        let zero = VectorField::zero(1, Shape::Vector(1));
        assert!(probe_modulus(&zero, &Modulus::DiniLog { beta: 2.0 }, &Bounds::cube(1, -5.0, 5.0), 500, 0)
            .unwrap()
            .passed());
        let root = parse_field("sqrt(abs(x1))", 1, 1).unwrap();
        assert!(probe_modulus(&root, &h, &Bounds::cube(1, -4.0, 4.0), 2000, 0).unwrap().passed());
        let lin = parse_field("x1", 1, 1).unwrap();
        match probe_modulus(&lin, &h, &Bounds::cube(1, 0.0, 4.0), 500, 0).unwrap() {
            ModulusCheck::Fail { x, y, .. } => assert!((x[0] - y[0]).abs() > 1.0),
            other => panic!("{other:?}"),
        }
    }
}
