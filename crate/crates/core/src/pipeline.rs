//! The end-to-end verification sequence: validate, transform, conjugacy,
//! rates and the Monte Carlo ladders, reported gate by gate.

use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use crate::action::{minimize_rate, rate_via_transform, skeleton_conjugacy, ControlPath, RateOptions, Target};
use crate::dynamics::Dynamics;
use crate::ldp::{check_bound, ldp_experiment, BoundSide, EventSpec, FitModel, LdpEstimate};
use crate::model::{default_cutoffs, dini_classify, probe, DiniVerdict, Modulus, Region, SdeProblem};
use crate::rng::{normal_pair, stream_rng};
use crate::simulate::{conjugacy_refinement, simulate_path};
use crate::zvonkin::{find_lambda0, transform, GridSpec, Lambda0, ZvonkinMap};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStatus {
    Pass,
    Fail,
    NotApplicable,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct GateReport {
    pub gate: usize,
    pub name: &'static str,
    pub status: GateStatus,
    pub detail: String,
    pub metrics: Value,
}

impl GateReport {
    fn new(gate: usize, pass: bool, detail: String, metrics: Value) -> GateReport {
        GateReport {
            gate,
            name: GATE_NAMES[gate - 1],
            status: if pass { GateStatus::Pass } else { GateStatus::Fail },
            detail,
            metrics,
        }
    }

    fn not_applicable(gate: usize, reason: &str) -> GateReport {
        GateReport {
            gate,
            name: GATE_NAMES[gate - 1],
            status: GateStatus::NotApplicable,
            detail: reason.to_string(),
            metrics: Value::Null,
        }
    }

    pub fn passed(&self) -> bool {
        self.status != GateStatus::Fail
    }
}

pub const GATE_NAMES: [&str; 11] = [
    "zvonkin-constant-oracle",
    "norm-certificate",
    "homeomorphism-round-trip",
    "ito-conjugacy",
    "rate-oracles",
    "transform-rate-identity",
    "ldp-slope",
    "singular-insensitivity",
    "degenerate-ldp",
    "dini-classification",
    "bound-checks",
];

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub resolution: usize,
    pub lambda_start: f64,
    pub lambda_growth: f64,
    pub picard_tol: f64,
    pub round_trip_points: usize,
    pub conjugacy_paths: usize,
    pub conjugacy_steps: usize,
    pub skeleton_controls: usize,
    /// Overrides the problem's path count when set.
    pub n_paths: Option<usize>,
    /// Gates not run; echoed in the report.
    pub skip: Vec<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            resolution: 257,
            lambda_start: 1.0,
            lambda_growth: 2.0,
            picard_tol: 1e-10,
            round_trip_points: 1000,
            conjugacy_paths: 200,
            conjugacy_steps: 25,
            skeleton_controls: 20,
            n_paths: None,
            skip: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub problem: String,
    pub options: VerifyOptions,
    pub certificate: String,
    pub gates: Vec<GateReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(GateReport::passed)
    }

    pub fn failed_gates(&self) -> Vec<&'static str> {
        self.gates.iter().filter(|g| !g.passed()).map(|g| g.name).collect()
    }
}

/// Problem with `b1 = 0`, `sigma = I` and constant `b2 = c` on `[-5, 5]^n`.
pub fn constant_drift_problem(c: &[f64]) -> Result<SdeProblem, Error> {
    let n = c.len();
    let zeros = vec!["0"; n].join("; ");
    let params = c.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ");
    let text = format!(
        "[problem]\nname = \"constant-{n}d\"\nlayout = \"nondegenerate\"\ndim = {n}\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"{zeros}\"\n\n[singular]\nfield = {{ builtin = \"constant\", params = [{params}] }}\n\n\
         [diffusion]\nsigma = {{ builtin = \"identity\" }}\n"
    );
    Ok(SdeProblem::from_toml_str(&text)?)
}

/// Solved map for the problem's noisy block.
pub fn solve_map(problem: &SdeProblem, opts: &VerifyOptions) -> Result<Lambda0, Error> {
    let spec = GridSpec::for_problem(problem, opts.resolution);
    Ok(find_lambda0(problem, &spec, opts.lambda_start, opts.lambda_growth, opts.picard_tol)?)
}

fn gate_constant_oracle(opts: &VerifyOptions) -> Result<GateReport, Error> {
    let mut rows = Vec::new();
    let mut pass = true;
    for c in [vec![0.7], vec![0.3, -0.5]] {
        let p = constant_drift_problem(&c)?;
        let spec = GridSpec::for_problem(&p, if c.len() == 1 { opts.resolution } else { 33 });
        let l0 = find_lambda0(&p, &spec, opts.lambda_start, opts.lambda_growth, opts.picard_tol)?;
        let norm_c = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut expected = opts.lambda_start;
        while norm_c / expected > 0.5 {
            expected *= opts.lambda_growth;
        }
        let err = l0
            .map
            .u
            .values
            .chunks(c.len())
            .flat_map(|u| u.iter().zip(&c).map(|(a, b)| (a - b / l0.lambda0).abs()))
            .fold(0.0, f64::max);
        let ok = err <= 1e-8 && l0.lambda0 == expected;
        pass &= ok;
        rows.push(json!({"c": c, "lambda0": l0.lambda0, "expected_lambda0": expected, "sup_error": err}));
    }
    Ok(GateReport::new(
        1,
        pass,
        "u = c/lambda to 1e-8 at the first lambda with |c|/lambda <= 1/2".into(),
        json!(rows),
    ))
}

fn gate_certificate(l0: &Lambda0) -> GateReport {
    let sums: Vec<f64> = l0.trajectory.iter().map(|s| s.sum.unwrap_or(f64::INFINITY)).collect();
    let monotone = sums.windows(2).all(|w| w[1] <= w[0]);
    let pass = l0.map.certified && l0.map.norm_sum() <= 0.5 && monotone;
    GateReport::new(
        2,
        pass,
        l0.map.certificate_line(),
        json!({"lambda0": l0.lambda0, "norms": l0.map.norms, "ladder": l0.trajectory.iter().map(|s| json!({"lambda": s.lambda, "sum": s.sum})).collect::<Vec<_>>(), "nonincreasing": monotone}),
    )
}

/// Round trip and per-step contraction ratios of the inverse iteration.
/// Ratios are taken while the previous update exceeds `1e-11`; below that
/// the updates are rounding noise.
pub fn round_trip(map: &ZvonkinMap, n_points: usize, seed: u64) -> Result<(f64, f64), Error> {
    let interior = map.interior();
    let mut worst = 0.0f64;
    let mut ratio = 0.0f64;
    for i in 0..n_points as u64 {
        let mut rng = stream_rng(seed, i);
        let x = interior.sample(&mut rng);
        let y = map.theta(&x)?;
        let t = map.theta_inv(&y, 1e-14)?;
        let err = t.x.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        for w in t.updates.windows(2) {
            if w[0] > 1e-11 {
                ratio = ratio.max(w[1] / w[0]);
            }
        }
    }
    Ok((worst, ratio))
}

fn gate_round_trip(map: &ZvonkinMap, opts: &VerifyOptions) -> Result<GateReport, Error> {
    let (err, ratio) = round_trip(map, opts.round_trip_points, opts.seed)?;
    Ok(GateReport::new(
        3,
        err <= 1e-10 && ratio <= 0.5 + 1e-6,
        format!("max round-trip error {err:.3e}, max contraction ratio {ratio:.4}"),
        json!({"points": opts.round_trip_points, "max_error": err, "max_ratio": ratio}),
    ))
}

fn gate_conjugacy(problem: &SdeProblem, map: &Arc<ZvonkinMap>, eps: f64, opts: &VerifyOptions) -> Result<GateReport, Error> {
    let levels = conjugacy_refinement(problem, map.clone(), eps, opts.conjugacy_steps, 4, opts.seed, opts.conjugacy_paths)?;
    let means: Vec<f64> = levels.iter().map(|c| c.mean).collect();
    let ratios: Vec<f64> = means.windows(2).map(|w| w[0] / w[1]).collect();
    let exact = means.iter().all(|&m| m == 0.0);
    let pass = exact || ratios.iter().all(|&r| r >= 1.15);
    Ok(GateReport::new(
        4,
        pass,
        if exact {
            "identity transform: discrepancy 0 at every resolution".into()
        } else {
            format!("mean sup discrepancy ratios per halving {ratios:.3?}")
        },
        json!({"eps": eps, "levels": levels, "ratios": ratios}),
    ))
}

/// `1/2 a^2 / G(T)` with `G(T) = (1 - e^{-2T}) / 2`, for `dX = -X dt + dW`
/// from 0 to `a`.
pub fn ou_rate(a: f64, horizon: f64) -> f64 {
    0.5 * a * a / ((1.0 - (-2.0 * horizon).exp()) / 2.0)
}

fn gate_rate_oracles(opts: &VerifyOptions) -> Result<GateReport, Error> {
    let ro = RateOptions::default();
    let free = crate::model::registry::bundled("free-endpoint").expect("bundled");
    let a = [0.6, 0.8];
    let r_free = minimize_rate(&free, &Target::Region(Region::Ball { center: a.to_vec(), radius: 0.0 }), 20, 4, opts.seed, &ro)?;
    let want_free = 1.0 / (2.0 * free.horizon);
    let ou = crate::model::registry::bundled("ou-1d").expect("bundled");
    let r_ou = minimize_rate(&ou, &Target::Region(Region::Ball { center: vec![1.0], radius: 0.0 }), 20, 4, opts.seed, &ro)?;
    let want_ou = ou_rate(1.0, ou.horizon);
    let e1 = (r_free.value - want_free).abs() / want_free;
    let e2 = (r_ou.value - want_ou).abs() / want_ou;
    Ok(GateReport::new(
        5,
        e1 <= 0.01 && e2 <= 0.01,
        format!("free {:.6} vs {want_free}, OU {:.6} vs {want_ou:.6}", r_free.value, r_ou.value),
        json!({"free": {"value": r_free.value, "exact": want_free, "rel_error": e1}, "ou": {"value": r_ou.value, "exact": want_ou, "rel_error": e2}}),
    ))
}

fn random_controls(m: usize, n_intervals: usize, horizon: f64, count: usize, seed: u64) -> Vec<ControlPath> {
    (0..count as u64)
        .map(|i| {
            let mut rng = stream_rng(seed ^ 0x5EED, i);
            let mut hdot = Vec::with_capacity(n_intervals * m + 1);
            while hdot.len() < n_intervals * m {
                let (a, b) = normal_pair(&mut rng);
                hdot.push(a);
                hdot.push(b);
            }
            hdot.truncate(n_intervals * m);
            ControlPath { hdot, m, horizon }
        })
        .collect()
}

fn rate_target(problem: &SdeProblem) -> Region {
    let e = problem.experiment.as_ref().expect("checked by caller");
    e.target.clone().unwrap_or_else(|| e.event.clone())
}

fn gate_transform_rate(problem: &SdeProblem, map: &Arc<ZvonkinMap>, opts: &VerifyOptions) -> Result<GateReport, Error> {
    let e = problem.experiment.as_ref().expect("checked by caller");
    let region = rate_target(problem);
    let ro = RateOptions::default();
    let direct = minimize_rate(problem, &Target::Region(region.clone()), e.n_intervals, e.restarts, opts.seed, &ro)?;
    let via = rate_via_transform(problem, map.clone(), &region, e.n_intervals, e.restarts, opts.seed, &ro)?;
    let rel = (direct.value - via.value).abs() / direct.value.abs().max(1e-12);
    let rel = if direct.value == via.value { 0.0 } else { rel };
    let tsde = transform(problem, map.clone())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for h in random_controls(problem.noisy_dim(), 10, problem.horizon, opts.skeleton_controls, opts.seed) {
        let c = match skeleton_conjugacy(&tsde, &h, 200) {
            Ok(c) => c,
            Err(crate::action::ActionError::Escaped { .. }) => continue,
            Err(err) => return Err(err.into()),
        };
        checked += 1;
        let tol = c.tolerance().max(1e-14);
        worst = worst.max(c.sup_error / tol);
    }
    let pass = rel <= 0.02 && worst <= 10.0 && checked > 0;
    Ok(GateReport::new(
        6,
        pass,
        format!(
            "direct {:.6} vs transformed {:.6} ({:.3}%), skeleton error / tolerance <= {worst:.3} over {checked} controls",
            direct.value,
            via.value,
            100.0 * rel
        ),
        json!({"direct": direct.value, "via_transform": via.value, "rel_diff": rel, "skeleton_ratio": worst, "controls": checked}),
    ))
}

fn run_ldp(problem: &SdeProblem, with_singular: bool, opts: &VerifyOptions) -> Result<LdpEstimate, Error> {
    let e = problem.experiment.as_ref().expect("checked by caller");
    let event = EventSpec::terminal(e.event.clone(), e.closed);
    Ok(ldp_experiment(
        problem,
        &event,
        &e.eps_ladder,
        opts.n_paths.unwrap_or(e.n_paths),
        e.n_steps,
        opts.seed,
        with_singular,
        FitModel::Asymptotic,
    )?)
}

fn event_rate(problem: &SdeProblem, opts: &VerifyOptions) -> Result<crate::action::RateResult, Error> {
    let e = problem.experiment.as_ref().expect("checked by caller");
    Ok(minimize_rate(
        problem,
        &Target::Region(e.event.clone()),
        e.n_intervals,
        e.restarts,
        opts.seed,
        &RateOptions::default(),
    )?)
}

fn slope_metrics(est: &LdpEstimate, rate: f64) -> Value {
    json!({
        "slope": est.slope(),
        "stderr": est.stderr(),
        "rate": rate,
        "escape_fraction": est.escape_fraction(),
        "ladder": est.ladder,
    })
}

/// Largest single-step change of the X block against `|b̄| dt` along
/// simulated paths; returns `(max ratio, max |dX|)`.
pub fn x_block_check(problem: &SdeProblem, eps: f64, n_steps: usize, n_paths: usize, seed: u64) -> Result<(f64, f64), Error> {
    let d1 = problem.layout.offset();
    let dt = problem.horizon / n_steps as f64;
    let mut ratio = 0.0f64;
    let mut max_dx = 0.0f64;
    let mut drift = vec![0.0; problem.dim()];
    let mut sigma = vec![0.0; problem.noisy_dim().pow(2)];
    let mut scratch = Vec::new();
    for p in 0..n_paths as u64 {
        let s = match simulate_path(problem, eps, n_steps, seed, p) {
            Ok(s) => s,
            Err(crate::simulate::SimError::Escaped { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        for w in s.states.windows(2) {
            Dynamics::eval(problem, eps, &w[0], &mut drift, &mut sigma, &mut scratch)?;
            let bound = drift[..d1].iter().map(|v| v * v).sum::<f64>().sqrt() * dt;
            let dx = w[0][..d1].iter().zip(&w[1][..d1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            max_dx = max_dx.max(dx);
            if dx > 0.0 {
                ratio = ratio.max(dx / bound);
            }
        }
    }
    Ok((ratio, max_dx))
}

fn gate_dini(problem: &SdeProblem) -> Result<GateReport, Error> {
    let cut = default_cutoffs();
    let mut ok = true;
    let mut rows = Vec::new();
    for (beta, finite) in [(1.5, true), (2.0, true), (3.0, true), (0.5, false), (1.0, false)] {
        let r = dini_classify(&Modulus::DiniLog { beta }, &cut)?;
        let got = matches!(r.verdict, DiniVerdict::Finite { .. });
        ok &= got == finite;
        rows.push(json!({"modulus": format!("dini_log({beta})"), "finite": got, "expected_finite": finite}));
    }
    for alpha in [0.25, 0.5, 0.75] {
        let r = dini_classify(&Modulus::Holder { alpha }, &cut)?;
        let (good, value) = match r.verdict {
            DiniVerdict::Finite { value } => ((value * alpha - 1.0).abs() <= 1e-3, Some(value)),
            DiniVerdict::Divergent => (false, None),
        };
        ok &= good;
        rows.push(json!({"modulus": format!("holder({alpha})"), "value": value, "expected": 1.0 / alpha}));
    }
    let own = dini_classify(&problem.modulus, &cut)?;
    let own_finite = matches!(own.verdict, DiniVerdict::Finite { .. });
    ok &= own_finite;
    Ok(GateReport::new(
        10,
        ok,
        format!("reference moduli classified as expected; problem modulus finite: {own_finite}"),
        json!({"reference": rows, "problem_modulus_finite": own_finite}),
    ))
}

/// Runs validation and the eleven gates on `problem`.
pub fn verify(problem: &SdeProblem, opts: &VerifyOptions) -> Result<VerifyReport, Error> {
    problem.check()?;
    let e = problem
        .experiment
        .clone()
        .ok_or_else(|| Error::Input("problem has no [experiment] section".into()))?;
    let rows = probe::validate_problem(problem, &probe::ValidateOptions {
        seed: opts.seed,
        ..Default::default()
    });
    if !probe::all_pass(&rows) {
        return Err(Error::Validation(rows));
    }
    let skip = |g: usize| opts.skip.contains(&g);
    let mut gates: Vec<GateReport> = Vec::new();
    let mut push = |gate: usize, f: &mut dyn FnMut() -> Result<GateReport, Error>| -> Result<(), Error> {
        if skip(gate) {
            gates.push(GateReport {
                gate,
                name: GATE_NAMES[gate - 1],
                status: GateStatus::Skipped,
                detail: "skipped on request".into(),
                metrics: Value::Null,
            });
        } else {
            gates.push(f()?);
        }
        Ok(())
    };

    let l0 = solve_map(problem, opts)?;
    let certificate = l0.map.certificate_line();
    let map = Arc::new(l0.map.clone());
    let degenerate = problem.layout.is_degenerate();
    let singular = !problem.singular.is_zero();

    push(1, &mut || gate_constant_oracle(opts))?;
    push(2, &mut || Ok(gate_certificate(&l0)))?;
    push(3, &mut || gate_round_trip(&map, opts))?;
    push(4, &mut || gate_conjugacy(problem, &map, e.conjugacy_eps, opts))?;
    push(5, &mut || gate_rate_oracles(opts))?;
    push(6, &mut || gate_transform_rate(problem, &map, opts))?;

    let needs_ldp = [7, 8, 9, 11].iter().any(|g| !skip(*g));
    let (with, rate) = if needs_ldp {
        (Some(run_ldp(problem, true, opts)?), Some(event_rate(problem, opts)?))
    } else {
        (None, None)
    };
    let tol = if degenerate { 0.15 } else { 0.10 };
    push(7, &mut || {
        if degenerate {
            return Ok(GateReport::not_applicable(7, "degenerate layout: the slope is gated by degenerate-ldp"));
        }
        let (est, r) = (with.as_ref().unwrap(), rate.as_ref().unwrap());
        let rel = (est.slope() + r.value).abs() / r.value;
        Ok(GateReport::new(
            7,
            rel <= tol && est.escape_fraction() <= 1e-3,
            format!("slope {:.4} +/- {:.4} vs -{:.4} ({:.2}%)", est.slope(), est.stderr(), r.value, 100.0 * rel),
            slope_metrics(est, r.value),
        ))
    })?;
    push(8, &mut || {
        if !singular {
            return Ok(GateReport::not_applicable(8, "b2 is identically zero"));
        }
        let a = with.as_ref().unwrap();
        let b = run_ldp(problem, false, opts)?;
        let diff = (a.slope() - b.slope()).abs();
        let comb = (a.stderr().powi(2) + b.stderr().powi(2)).sqrt();
        let rel = diff / b.slope().abs();
        Ok(GateReport::new(
            8,
            diff <= 2.0 * comb && rel <= 0.10,
            format!("with b2 {:.4} +/- {:.4}, without {:.4} +/- {:.4}", a.slope(), a.stderr(), b.slope(), b.stderr()),
            json!({"with": slope_metrics(a, f64::NAN), "without": slope_metrics(&b, f64::NAN), "diff": diff, "combined_stderr": comb, "rel_diff": rel}),
        ))
    })?;
    push(9, &mut || {
        if !degenerate {
            return Ok(GateReport::not_applicable(9, "nondegenerate layout"));
        }
        let (est, r) = (with.as_ref().unwrap(), rate.as_ref().unwrap());
        let rel = (est.slope() + r.value).abs() / r.value;
        let (ratio, max_dx) = x_block_check(problem, e.eps_ladder[0], e.n_steps, 200, opts.seed)?;
        Ok(GateReport::new(
            9,
            rel <= tol && ratio <= 1.0 + 1e-9 && est.escape_fraction() <= 1e-3,
            format!(
                "slope {:.4} +/- {:.4} vs -{:.4} ({:.2}%), max |dX| / (|b| dt) = {ratio:.6}",
                est.slope(),
                est.stderr(),
                r.value,
                100.0 * rel
            ),
            json!({"ldp": slope_metrics(est, r.value), "x_step_ratio": ratio, "max_dx": max_dx}),
        ))
    })?;
    push(10, &mut || gate_dini(problem))?;
    push(11, &mut || {
        let (est, r) = (with.as_ref().unwrap(), rate.as_ref().unwrap());
        let side = if e.closed { BoundSide::UpperForClosed } else { BoundSide::LowerForOpen };
        let b = check_bound(est.slope(), est.stderr(), r.value, side);
        Ok(GateReport::new(
            11,
            b.passed && r.converged,
            format!("slope {:.4} vs -rate {:.4} with margin {:.4}", b.slope, -b.rate, b.margin),
            json!(b),
        ))
    })?;
    Ok(VerifyReport {
        problem: problem.name.clone(),
        options: opts.clone(),
        certificate,
        gates,
    })
}
