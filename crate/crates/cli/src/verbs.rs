use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use sdeldp::action::{minimize_rate, rate_via_transform, RateOptions, RateReport, Target};
use sdeldp::ldp::{bound_check, ldp_experiment, BoundSide, EventSpec, FitModel, LdpReport};
use sdeldp::model::probe::{all_pass, validate_problem, ValidateOptions, Verdict};
use sdeldp::model::registry;
use sdeldp::pipeline::{self, GateStatus, VerifyOptions};
use sdeldp::simulate::{simulate_batch, write_paths, BatchSummary};
use sdeldp::zvonkin::solver::find_lambda0_capped;
use sdeldp::zvonkin::{transform, GridSpec};
use sdeldp::{Error, Region, SdeProblem};

use crate::{Common, Fit, MapArgs, RegionArgs};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    tool_version: &'static str,
    verb: &'a str,
    args: &'a [String],
    problem: &'a str,
    problem_file: &'static str,
    config: Value,
    outputs: Vec<String>,
}

fn setup(common: &Common) -> Result<SdeProblem, Error> {
    let problem = registry::resolve(&common.problem)?;
    problem.check()?;
    if let Some(n) = common.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Input(e.to_string()))?;
    }
    fs::create_dir_all(&common.out)?;
    Ok(problem)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes the manifest and a copy of the resolved problem.
fn finish(common: &Common, args: &[String], verb: &str, problem: &SdeProblem, config: Value, mut outputs: Vec<String>) -> Result<(), Error> {
    fs::write(common.out.join("problem.toml"), problem.to_toml())?;
    outputs.sort();
    let m = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        verb,
        args,
        problem: &problem.name,
        problem_file: "problem.toml",
        config,
        outputs,
    };
    write_json(&common.out.join("manifest.json"), &m)
}

fn region(args: &RegionArgs) -> Option<Region> {
    if let Some(c) = &args.center {
        return Some(Region::Ball {
            center: c.clone(),
            radius: args.radius,
        });
    }
    args.normal.as_ref().map(|n| Region::HalfSpace {
        normal: n.clone(),
        offset: args.offset,
    })
}

fn solve_map(problem: &SdeProblem, map: &MapArgs, cap: Option<f64>) -> Result<sdeldp::zvonkin::Lambda0, Error> {
    let spec = GridSpec::for_problem(problem, map.resolution);
    let cap = cap.unwrap_or(map.lambda_start * 1048576.0);
    Ok(find_lambda0_capped(problem, &spec, map.lambda_start, map.lambda_growth, map.tol, cap)?)
}

pub fn validate(common: &Common, args: &[String], n_pairs: usize, n_points: usize) -> Result<u8, Error> {
    let problem = setup(common)?;
    let opts = ValidateOptions {
        n_pairs,
        n_points,
        seed: common.seed,
        ..Default::default()
    };
    let rows = validate_problem(&problem, &opts);
    for r in &rows {
        let verdict = match r.verdict {
            Verdict::Pass => "pass",
            Verdict::Fail => "FAIL",
            Verdict::Advisory => "advisory",
        };
        match &r.witness {
            Some(w) => println!("{verdict:>8}  {}  ({w})", r.assumption),
            None => println!("{verdict:>8}  {}", r.assumption),
        }
    }
    write_json(&common.out.join("validate.json"), &rows)?;
    let config = json!({"n_pairs": n_pairs, "n_points": n_points, "seed": common.seed});
    finish(common, args, "validate", &problem, config, vec!["validate.json".into()])?;
    Ok(if all_pass(&rows) { 0 } else { 1 })
}

pub fn zvonkin(common: &Common, args: &[String], map: &MapArgs, cap: Option<f64>) -> Result<u8, Error> {
    let problem = setup(common)?;
    let l0 = solve_map(&problem, map, cap)?;
    l0.map.write(&common.out.join("map.json"), &common.out.join("map.csv"))?;
    let line = l0.map.certificate_line();
    fs::write(common.out.join("certificate.txt"), format!("{line}\n"))?;
    println!("{line}");
    let config = json!({
        "resolution": map.resolution,
        "lambda_start": map.lambda_start,
        "lambda_growth": map.lambda_growth,
        "lambda_cap": cap,
        "tol": map.tol,
    });
    let outputs = vec!["map.json".into(), "map.csv".into(), "certificate.txt".into()];
    finish(common, args, "zvonkin", &problem, config, outputs)?;
    Ok(0)
}

fn default_steps(problem: &SdeProblem, n_steps: Option<usize>) -> usize {
    n_steps.or(problem.experiment.as_ref().map(|e| e.n_steps)).unwrap_or(100)
}

pub fn simulate(common: &Common, args: &[String], eps: f64, n_paths: usize, n_steps: Option<usize>, map: Option<&MapArgs>) -> Result<u8, Error> {
    let problem = setup(common)?;
    let n_steps = default_steps(&problem, n_steps);
    let start = Instant::now();
    let batch = match map {
        Some(m) => {
            let l0 = solve_map(&problem, m, None)?;
            let tsde = transform(&problem, Arc::new(l0.map))?;
            simulate_batch(&tsde, eps, n_steps, common.seed, n_paths)?
        }
        None => simulate_batch(&problem, eps, n_steps, common.seed, n_paths)?,
    };
    let dir = common.out.join("paths");
    write_paths(&dir, &batch.paths)?;
    let summary = BatchSummary {
        n_paths,
        epsilon: eps,
        dt: problem.horizon / n_steps as f64,
        escapes: batch.escapes,
        wall_time: start.elapsed().as_secs_f64(),
    };
    write_json(&common.out.join("summary.json"), &summary)?;
    for (p, msg) in &batch.failures {
        eprintln!("path {p}: {msg}");
    }
    println!("{} paths written, {} escaped", batch.paths.len(), batch.escapes);
    let mut outputs: Vec<String> = batch.paths.iter().map(|s| format!("paths/path_{:06}.csv", s.path)).collect();
    outputs.push("summary.json".into());
    let config = json!({
        "eps": eps,
        "n_paths": n_paths,
        "n_steps": n_steps,
        "transformed": map.is_some(),
        "map": map.map(|m| json!({"resolution": m.resolution, "lambda_start": m.lambda_start, "lambda_growth": m.lambda_growth, "tol": m.tol})),
    });
    finish(common, args, "simulate", &problem, config, outputs)?;
    Ok(if batch.failures.is_empty() { 0 } else { 3 })
}

fn experiment_region(problem: &SdeProblem, target: bool) -> Result<Region, Error> {
    let e = problem
        .experiment
        .as_ref()
        .ok_or_else(|| Error::Input("no region given and the problem has no [experiment] section".into()))?;
    Ok(if target {
        e.target.clone().unwrap_or_else(|| e.event.clone())
    } else {
        e.event.clone()
    })
}

pub fn rate(
    common: &Common,
    args: &[String],
    target: &RegionArgs,
    n_intervals: Option<usize>,
    restarts: Option<usize>,
    steps_per_interval: usize,
    map: Option<&MapArgs>,
) -> Result<u8, Error> {
    let problem = setup(common)?;
    let region = match region(target) {
        Some(r) => r,
        None => experiment_region(&problem, true)?,
    };
    let exp = problem.experiment.as_ref();
    let n_intervals = n_intervals.or(exp.map(|e| e.n_intervals)).unwrap_or(20);
    let restarts = restarts.or(exp.map(|e| e.restarts)).unwrap_or(8);
    let opts = RateOptions {
        steps_per_interval,
        ..Default::default()
    };
    let result = match map {
        Some(m) => {
            let l0 = solve_map(&problem, m, None)?;
            rate_via_transform(&problem, Arc::new(l0.map), &region, n_intervals, restarts, common.seed, &opts)?
        }
        None => minimize_rate(&problem, &Target::Region(region.clone()), n_intervals, restarts, common.seed, &opts)?,
    };
    result
        .minimizer
        .write_csv(BufWriter::new(File::create(common.out.join("minimizer.csv"))?))?;
    let report = RateReport {
        value: result.value,
        feasibility_residual: result.feasibility_residual,
        multistart_spread: result.multistart_spread,
        n_intervals,
        restarts,
        converged: result.converged,
        endpoint: result.endpoint.clone(),
        minimizer_csv_path: "minimizer.csv".into(),
    };
    write_json(&common.out.join("rate.json"), &report)?;
    println!(
        "rate {:.6} (residual {:.2e}, spread {:.2e}, converged {})",
        result.value, result.feasibility_residual, result.multistart_spread, result.converged
    );
    let config = json!({
        "target": region,
        "n_intervals": n_intervals,
        "restarts": restarts,
        "steps_per_interval": steps_per_interval,
        "via_transform": map.is_some(),
        "map": map.map(|m| json!({"resolution": m.resolution, "lambda_start": m.lambda_start, "lambda_growth": m.lambda_growth, "tol": m.tol})),
    });
    finish(common, args, "rate", &problem, config, vec!["rate.json".into(), "minimizer.csv".into()])?;
    Ok(if result.converged { 0 } else { 3 })
}

pub struct LdpArgs {
    pub event: RegionArgs,
    pub eps_ladder: Option<Vec<f64>>,
    pub n_paths: Option<usize>,
    pub n_steps: Option<usize>,
    pub without_singular: bool,
    pub open: bool,
    pub fit: Fit,
    pub no_rate: bool,
}

pub fn ldp(common: &Common, args: &[String], a: LdpArgs) -> Result<u8, Error> {
    let problem = setup(common)?;
    let exp = problem.experiment.as_ref();
    let (event_region, closed) = match region(&a.event) {
        Some(r) => (r, !a.open),
        None => (experiment_region(&problem, false)?, !a.open && exp.is_none_or(|e| e.closed)),
    };
    let ladder = a
        .eps_ladder
        .or(exp.map(|e| e.eps_ladder.clone()))
        .ok_or_else(|| Error::Input("no epsilon ladder given".into()))?;
    let n_paths = a.n_paths.or(exp.map(|e| e.n_paths)).unwrap_or(100_000);
    let n_steps = default_steps(&problem, a.n_steps);
    let model = match a.fit {
        Fit::Affine => FitModel::Affine,
        Fit::Asymptotic => FitModel::Asymptotic,
    };
    let event = EventSpec::terminal(event_region.clone(), closed);
    let est = ldp_experiment(&problem, &event, &ladder, n_paths, n_steps, common.seed, !a.without_singular, model)?;
    est.write_csv(BufWriter::new(File::create(common.out.join("ldp.csv"))?))?;
    let mut checks = Vec::new();
    let mut rate_value = None;
    if !a.no_rate {
        let ni = exp.map(|e| e.n_intervals).unwrap_or(20);
        let rs = exp.map(|e| e.restarts).unwrap_or(8);
        let r = minimize_rate(&problem, &Target::Region(event_region.clone()), ni, rs, common.seed, &RateOptions::default())?;
        rate_value = Some(r.value);
        let side = if closed { BoundSide::UpperForClosed } else { BoundSide::LowerForOpen };
        checks.push(bound_check(&est, &r, side)?);
    }
    let report = LdpReport {
        slope: est.slope(),
        stderr: est.stderr(),
        rate_value,
        bound_checks: checks.clone(),
        model,
        escapes: est.escapes(),
    };
    write_json(&common.out.join("ldp.json"), &report)?;
    for p in &est.ladder {
        println!("eps {:<8} p {:.4e} [{:.4e}, {:.4e}] hits {}", p.eps, p.p_hat, p.ci.0, p.ci.1, p.hits);
    }
    println!("slope {:.4} +/- {:.4}", est.slope(), est.stderr());
    if let Some(v) = rate_value {
        println!("rate {v:.4}; bound check {}", if checks.iter().all(|c| c.passed) { "pass" } else { "FAIL" });
    }
    let config = json!({
        "event": event_region,
        "closed": closed,
        "eps_ladder": ladder,
        "n_paths": n_paths,
        "n_steps": n_steps,
        "with_singular": !a.without_singular,
        "fit": model,
        "rate": !a.no_rate,
    });
    finish(common, args, "ldp", &problem, config, vec!["ldp.csv".into(), "ldp.json".into()])?;
    let ok = checks.iter().all(|c| c.passed) && est.escape_fraction() <= 1e-3;
    Ok(if ok { 0 } else { 1 })
}

pub fn verify(common: &Common, args: &[String], resolution: usize, n_paths: Option<usize>, skip: Vec<usize>) -> Result<u8, Error> {
    let problem = setup(common)?;
    if let Some(g) = skip.iter().find(|g| !(1..=11).contains(*g)) {
        return Err(Error::Input(format!("no gate {g}; gates are numbered 1 to 11")));
    }
    let opts = VerifyOptions {
        seed: common.seed,
        resolution,
        n_paths,
        skip,
        ..Default::default()
    };
    let report = pipeline::verify(&problem, &opts)?;
    let dir = common.out.join("gates");
    fs::create_dir_all(&dir)?;
    let mut outputs = vec!["verify.json".to_string()];
    for g in &report.gates {
        let name = format!("gate_{:02}_{}.json", g.gate, g.name);
        write_json(&dir.join(&name), g)?;
        outputs.push(format!("gates/{name}"));
        let status = match g.status {
            GateStatus::Pass => "pass",
            GateStatus::Fail => "FAIL",
            GateStatus::NotApplicable => "n/a",
            GateStatus::Skipped => "skipped",
        };
        println!("{:>2} {status:>7}  {:<26} {}", g.gate, g.name, g.detail);
    }
    write_json(&common.out.join("verify.json"), &report)?;
    let config = serde_json::to_value(&opts)?;
    finish(common, args, "verify", &problem, config, outputs)?;
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("failed gates: {}", report.failed_gates().join(", "));
        Ok(1)
    }
}
