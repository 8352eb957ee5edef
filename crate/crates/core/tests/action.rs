use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use proptest::prelude::*;

use sdeldp::action::{
    action, level_set_probe, minimize_rate, rate_via_transform, skeleton, skeleton_conjugacy, ControlPath,
    RateOptions, Target,
};
use sdeldp::model::registry;
use sdeldp::pipeline::constant_drift_problem;
use sdeldp::rng::stream_rng;
use sdeldp::zvonkin::{find_lambda0, transform, GridSpec};
use sdeldp::{Region, SdeProblem};

use rand::Rng;

fn problem(text: &str) -> SdeProblem {
    SdeProblem::from_toml_str(text).unwrap()
}

fn free(dim: usize) -> SdeProblem {
    let zeros = vec!["0"; dim].join("; ");
    problem(&format!(
        "[problem]\nname = \"free\"\nlayout = \"nondegenerate\"\ndim = {dim}\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"{zeros}\"\n\n[diffusion]\nsigma = {{ builtin = \"identity\" }}\n"
    ))
}

fn point(a: &[f64]) -> Target {
    Target::Region(Region::Ball {
        center: a.to_vec(),
        radius: 0.0,
    })
}

fn opts() -> RateOptions {
    RateOptions::default()
}

fn random_control(m: usize, n: usize, scale: f64, seed: u64) -> ControlPath {
    let mut rng = stream_rng(seed, 0);
    ControlPath {
        hdot: (0..m * n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect(),
        m,
        horizon: 1.0,
    }
}

#[test]
fn zero_control_on_zero_dynamics_stays_put() {
    let p = free(2);
    let g = skeleton(&p, &ControlPath::zero(4, 2, 1.0), 40).unwrap();
    assert!(g.states.iter().all(|z| z == &[0.0, 0.0]));
}

#[test]
fn constant_control_on_zero_dynamics_is_a_straight_line() {
    let p = free(2);
    let v = [0.7, -1.3];
    let g = skeleton(&p, &ControlPath::constant(&v, 5, 1.0), 50).unwrap();
    for (t, z) in g.times.iter().zip(&g.states) {
        assert!((z[0] - v[0] * t).abs() < 1e-14 && (z[1] - v[1] * t).abs() < 1e-14);
    }
}

#[test]
fn linear_dynamics_match_variation_of_constants() {
    let p = problem(
        "[problem]\nname = \"linear\"\nlayout = \"nondegenerate\"\ndim = 2\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"-x1 + 0.5*x2; -0.3*x2\"\n\n[diffusion]\nsigma = { builtin = \"identity\" }\n",
    );
    let a = Matrix2::new(-1.0, 0.5, 0.0, -0.3);
    let v = Vector2::new(0.4, 1.1);
    let want = a.try_inverse().unwrap() * ((a * p.horizon).exp() - Matrix2::identity()) * v;
    let g = skeleton(&p, &ControlPath::constant(&[v[0], v[1]], 10, 1.0), 1000).unwrap();
    let z = g.terminal();
    assert!((z[0] - want[0]).abs() < 1e-8 && (z[1] - want[1]).abs() < 1e-8, "{z:?} vs {want:?}");
}

#[test]
fn action_examples() {
    assert_eq!(action(&ControlPath::zero(3, 2, 1.0)), 0.0);
    assert_eq!(action(&ControlPath::constant(&[1.0], 7, 2.0)), 1.0);
    let alt = ControlPath {
        hdot: vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
        m: 2,
        horizon: 1.0,
    };
    assert!((action(&alt) - 0.5).abs() < 1e-15);
}

#[test]
fn free_endpoint_rate_is_half_a_squared_over_t() {
    let p = free(2);
    let a = [1.2, -0.5];
    let r = minimize_rate(&p, &point(&a), 10, 4, 0, &opts()).unwrap();
    let want = (1.44 + 0.25) / 2.0;
    assert!((r.value - want).abs() < 1e-6, "{}", r.value);
    for i in 0..10 {
        let h = r.minimizer.interval(i);
        assert!((h[0] - a[0]).abs() < 1e-4 && (h[1] - a[1]).abs() < 1e-4);
    }
    assert_eq!(r.value, action(&r.minimizer));
    assert!(r.feasibility_residual <= 1e-7);
}

#[test]
fn free_endpoint_matches_a_brute_force_two_interval_search() {
    let p = free(1);
    let a = 0.8;
    let r = minimize_rate(&p, &point(&[a]), 2, 2, 0, &opts()).unwrap();
    // h1 + h2 = 2a; minimize (h1^2 + h2^2) / 4 over a grid of h1
    let best = (0..=40_000)
        .map(|k| {
            let h1 = -2.0 + 1e-4 * k as f64;
            let h2 = 2.0 * a - h1;
            0.25 * (h1 * h1 + h2 * h2)
        })
        .fold(f64::INFINITY, f64::min);
    assert!((r.value - best).abs() < 1e-6, "{} vs {best}", r.value);
}

#[test]
fn reachable_target_costs_nothing() {
    let p = registry::bundled("ou-1d").unwrap();
    let target = Target::Region(Region::HalfSpace {
        normal: vec![1.0],
        offset: -1.0,
    });
    let r = minimize_rate(&p, &target, 8, 3, 0, &opts()).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.minimizer.hdot.iter().all(|&v| v == 0.0));
}

#[test]
fn ou_rate_matches_brute_force_and_the_gramian() {
    let p = registry::bundled("ou-1d").unwrap();
    let a = 1.0;
    let t = p.horizon;

    // two intervals: x(T) = c1 h1 + c2 h2 from the start at 0
    let c1 = (-0.5f64).exp() - (-1.0f64).exp();
    let c2 = 1.0 - (-0.5f64).exp();
    let brute = (0..=200_000)
        .map(|k| {
            let h1 = -5.0 + 5e-5 * k as f64;
            let h2 = (a - c1 * h1) / c2;
            0.25 * (h1 * h1 + h2 * h2)
        })
        .fold(f64::INFINITY, f64::min);
    let r2 = minimize_rate(&p, &point(&[a]), 2, 3, 0, &opts()).unwrap();
    assert!((r2.value / brute - 1.0).abs() < 1e-4, "{} vs {brute}", r2.value);

    let gram = (1.0 - (-2.0 * t).exp()) / 2.0;
    let exact = 0.5 * a * a / gram;
    let r = minimize_rate(&p, &point(&[a]), 20, 4, 0, &opts()).unwrap();
    assert!((r.value / exact - 1.0).abs() < 0.01, "{} vs {exact}", r.value);
    assert!(r.value >= exact - 1e-6);
}

#[test]
fn refining_the_control_class_never_raises_the_rate() {
    let p = problem(
        "[problem]\nname = \"bent\"\nlayout = \"nondegenerate\"\ndim = 1\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"-x1 + 0.8*sin(2*x1)\"\n\n[diffusion]\nsigma = \"1 + 0.2*tanh(x1)\"\n",
    );
    let values: Vec<f64> = [4, 8, 16]
        .iter()
        .map(|&n| minimize_rate(&p, &point(&[1.2]), n, 4, 0, &opts()).unwrap().value)
        .collect();
    for w in values.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{values:?}");
    }
}

#[test]
fn free_rate_scales_with_the_square_of_the_target() {
    let p = free(2);
    let a = [0.6, 0.8];
    let base = minimize_rate(&p, &point(&a), 8, 2, 0, &opts()).unwrap().value;
    for s in [0.5, 2.0] {
        let v = minimize_rate(&p, &point(&[s * a[0], s * a[1]]), 8, 2, 0, &opts()).unwrap().value;
        assert!((v / (s * s * base) - 1.0).abs() < 0.01, "s {s}: {v}");
    }
}

#[test]
fn position_block_sees_the_control_only_through_the_velocity() {
    let decoupled = problem(
        "[problem]\nname = \"decoupled\"\nlayout = \"degenerate\"\nd1 = 1\nd2 = 1\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"-x1 + 0.5; -y1\"\n\n[diffusion]\nsigma = \"1\"\n",
    );
    let coupled = registry::bundled("hamiltonian-2d").unwrap();
    let h1 = random_control(1, 6, 2.0, 1);
    let h2 = random_control(1, 6, 2.0, 2);
    let a = skeleton(&decoupled, &h1, 60).unwrap();
    let b = skeleton(&decoupled, &h2, 60).unwrap();
    for (u, v) in a.states.iter().zip(&b.states) {
        assert_eq!(u[0], v[0]);
    }
    let a = skeleton(&coupled, &h1, 60).unwrap();
    let b = skeleton(&coupled, &h2, 60).unwrap();
    assert_ne!(a.terminal()[0], b.terminal()[0]);
}

#[test]
fn zero_map_transform_gives_the_same_rate() {
    let p = registry::bundled("ou-1d").unwrap();
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 65), 1.0, 2.0, 1e-10).unwrap();
    let region = Region::Ball {
        center: vec![1.0],
        radius: 0.0,
    };
    let direct = minimize_rate(&p, &Target::Region(region.clone()), 10, 3, 7, &opts()).unwrap();
    let via = rate_via_transform(&p, Arc::new(l0.map), &region, 10, 3, 7, &opts()).unwrap();
    assert_eq!(direct.value, via.value);
    assert_eq!(direct.minimizer.hdot, via.minimizer.hdot);
}

#[test]
fn constant_drift_transform_shifts_the_target() {
    let c = 0.7;
    let p = constant_drift_problem(&[c]).unwrap();
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 129), 1.0, 2.0, 1e-10).unwrap();
    let shift = c / l0.lambda0;
    let map = Arc::new(l0.map);
    let a = 0.9;
    let region = Region::Ball {
        center: vec![a],
        radius: 0.0,
    };
    let direct = minimize_rate(&p, &Target::Region(region.clone()), 8, 2, 0, &opts()).unwrap();
    let via = rate_via_transform(&p, map.clone(), &region, 8, 2, 0, &opts()).unwrap();
    let tsde = transform(&p, map).unwrap();
    let shifted = minimize_rate(&tsde, &point(&[a + shift]), 8, 2, 0, &opts()).unwrap();
    assert!((direct.value - via.value).abs() < 1e-6);
    assert!((direct.value - shifted.value).abs() < 1e-6);
    assert!((via.endpoint[0] - (a + shift)).abs() < 1e-6);
}

#[test]
fn skeletons_are_conjugate_under_theta() {
    for name in ["dini-tanhlog-1d", "hamiltonian-2d"] {
        let p = registry::bundled(name).unwrap();
        let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 257), 1.0, 2.0, 1e-10).unwrap();
        let t = transform(&p, Arc::new(l0.map)).unwrap();
        for k in 0..20 {
            let h = random_control(p.noisy_dim(), 10, 1.5, 100 + k);
            let c = skeleton_conjugacy(&t, &h, 200).unwrap();
            assert!(c.sup_error <= 10.0 * c.tolerance(), "{name} control {k}: {c:?}");
        }
    }
}

#[test]
fn level_set_probe_examples() {
    let p = free(1);
    let zero = level_set_probe(&p, 0.0, 8, 64, 5, 0).unwrap();
    assert_eq!(zero.paths.len(), 1);
    assert!(zero.paths[0].states.iter().all(|z| z[0] == 0.0));

    let mut moduli = Vec::new();
    for c in [0.5, 1.0, 2.0] {
        let probe = level_set_probe(&p, c, 8, 64, 200, 3).unwrap();
        assert_eq!(probe.paths.len(), 200);
        for g in &probe.paths {
            assert!(action(&g.control) <= c * (1.0 + 1e-12));
            for i in 0..g.times.len() {
                for j in i + 1..g.times.len() {
                    let d = (g.states[j][0] - g.states[i][0]).abs();
                    let bound = (2.0 * c).sqrt() * (g.times[j] - g.times[i]).sqrt();
                    assert!(d <= bound * (1.0 + 1e-9));
                }
            }
        }
        moduli.push(probe.modulus);
    }
    assert!(moduli[0] <= moduli[1] && moduli[1] <= moduli[2], "{moduli:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn free_rate_never_beats_the_analytic_minimum(a0 in -1.5f64..1.5, a1 in -1.5f64..1.5) {
        let p = free(2);
        let r = minimize_rate(&p, &point(&[a0, a1]), 6, 2, 0, &opts()).unwrap();
        let bound = 0.5 * (a0 * a0 + a1 * a1);
        prop_assert!(r.value >= bound - 1e-6);
        prop_assert_eq!(r.value, action(&r.minimizer));
    }

    #[test]
    fn action_is_a_nonnegative_sum(h in prop::collection::vec(-10.0f64..10.0, 1..40), t in 0.1f64..5.0) {
        let n = h.len();
        let c = ControlPath { hdot: h.clone(), m: 1, horizon: t };
        let want = 0.5 * h.iter().map(|v| v * v).sum::<f64>() * t / n as f64;
        let got = action(&c);
        prop_assert!(got >= 0.0 && got.is_finite());
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want));
    }
}
