use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdeldp")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn constant_drift(dir: &Path, c: f64) -> String {
    let text = format!(
        "[problem]\nname = \"constant\"\nlayout = \"nondegenerate\"\ndim = 1\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"0\"\n\n[singular]\nfield = {{ builtin = \"constant\", params = [{c:?}] }}\n\n\
         [diffusion]\nsigma = \"1\"\n"
    );
    let path = dir.join("constant.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn validate_accepts_the_bundled_brownian_problem() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let o = run(&["validate", "--problem", "brownian-1d", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("validate.json").exists());
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["verb"], "validate");
    assert_eq!(m["problem"], "brownian-1d");
}

#[test]
fn validate_names_the_ellipticity_failure() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("stretched.toml");
    fs::write(
        &path,
        "[problem]\nname = \"stretched\"\nlayout = \"nondegenerate\"\ndim = 2\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"0; 0\"\n\n[diffusion]\nsigma = \"3; 0; 0; 1\"\n",
    )
    .unwrap();
    let out = tmp.path().join("v");
    let o = run(&["validate", "--problem", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let line = stdout(&o).lines().find(|l| l.contains("ellipticity")).unwrap().to_string();
    assert!(line.contains("FAIL"), "{line}");
}

#[test]
fn malformed_file_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[problem\nname = ").unwrap();
    let out = tmp.path().join("v");
    let o = run(&["validate", "--problem", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn zvonkin_without_singular_drift_has_zero_norms() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("z");
    let o = run(&["zvonkin", "--problem", "ou-1d", "--resolution", "65", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cert = fs::read_to_string(out.join("certificate.txt")).unwrap();
    assert!(cert.contains("norms=(0.000000e0,0.000000e0,0.000000e0)"), "{cert}");
    assert!(cert.contains("certified=true"));
    for f in ["map.json", "map.csv", "manifest.json", "problem.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn zvonkin_constant_drift_lands_on_the_ladder_rung_above_twice_c() {
    let tmp = TempDir::new().unwrap();
    let problem = constant_drift(tmp.path(), 0.7);
    let out = tmp.path().join("z");
    let o = run(&["zvonkin", "--problem", &problem, "--resolution", "65", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cert = fs::read_to_string(out.join("certificate.txt")).unwrap();
    // u = c/lambda has sup norm c/lambda; first ladder rung with 0.7/lambda <= 1/2 is 2
    assert!(cert.starts_with("lambda=2 "), "{cert}");
}

#[test]
fn zvonkin_cap_hit_reports_the_trajectory() {
    let tmp = TempDir::new().unwrap();
    let problem = constant_drift(tmp.path(), 0.7);
    let out = tmp.path().join("z");
    let o = run(&[
        "zvonkin", "--problem", &problem, "--resolution", "65", "--lambda-start", "0.25", "--lambda-cap", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("no certified lambda up to 1"), "{err}");
    assert!(err.contains("norm sums along the ladder"), "{err}");
}

#[test]
fn simulate_writes_one_csv_per_path() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("s");
    let o = run(&["simulate", "--problem", "brownian-1d", "--eps", "1", "--n-paths", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let n = fs::read_dir(out.join("paths")).unwrap().count();
    assert_eq!(n, 10);
    let s = read_json(&out.join("summary.json"));
    assert_eq!(s["n_paths"], 10);
    assert_eq!(s["escapes"], 0);
    let first = fs::read_to_string(out.join("paths/path_000000.csv")).unwrap();
    assert_eq!(first.lines().next().unwrap(), "t,x1");
}

#[test]
fn simulate_output_does_not_depend_on_workers() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, w) in [(&a, "1"), (&b, "3")] {
        let o = run(&[
            "simulate", "--problem", "ou-1d", "--eps", "0.3", "--n-paths", "6", "--seed", "9", "--workers", w, "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for k in 0..6 {
        let f = format!("paths/path_{k:06}.csv");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap());
    }
}

#[test]
fn rate_on_free_endpoint_is_half_a_squared() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    let o = run(&[
        "rate", "--problem", "free-endpoint", "--center=0.6,0.8", "--radius", "0", "--n-intervals", "10", "--restarts", "2",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("rate.json"));
    let v = r["value"].as_f64().unwrap();
    assert!((v - 0.5).abs() < 1e-6, "{v}");
    assert!(out.join("minimizer.csv").exists());
}

#[test]
fn ldp_gaussian_ladder_slope_is_near_minus_half() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("l");
    let o = run(&["ldp", "--problem", "brownian-1d", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("ldp.json"));
    let slope = r["slope"].as_f64().unwrap();
    assert!((slope + 0.5).abs() <= 0.05, "{slope}");
    assert!((r["rate_value"].as_f64().unwrap() - 0.5).abs() < 1e-6);
    assert_eq!(r["bound_checks"][0]["passed"], true);
    let csv = fs::read_to_string(out.join("ldp.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn verify_rejects_unknown_gate_numbers() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let o = run(&["verify", "--problem", "brownian-1d", "--skip", "12", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_echoes_skips_and_writes_one_report_per_gate() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let o = run(&[
        "verify", "--problem", "brownian-1d", "--skip", "4,5,6,7,8,9,10,11", "--resolution", "65", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 11);
    assert_eq!(fs::read_dir(out.join("gates")).unwrap().count(), 11);
    let r = read_json(&out.join("verify.json"));
    let skipped = r["gates"].as_array().unwrap().iter().filter(|g| g["status"] == "skipped").count();
    assert_eq!(skipped, 8);
    assert_eq!(r["options"]["skip"].as_array().unwrap().len(), 8);
}
