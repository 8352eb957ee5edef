use std::sync::Arc;

use sdeldp::model::registry;
use sdeldp::pipeline::constant_drift_problem;
use sdeldp::rng::{brownian_increments, coarsen};
use sdeldp::simulate::{
    conjugacy_check, conjugacy_refinement, em_step, simulate_batch, simulate_degenerate, simulate_original,
    simulate_transformed, simulate_with_increments, stream_path, StepBuffers,
};
use sdeldp::zvonkin::{find_lambda0, transform, GridSpec};
use sdeldp::{SdeProblem, SimError};

fn problem(text: &str) -> SdeProblem {
    SdeProblem::from_toml_str(text).unwrap()
}

fn integrator(start: [f64; 2]) -> SdeProblem {
    let mut p = problem(
        "[problem]\nname = \"integrator\"\nlayout = \"degenerate\"\nd1 = 1\nd2 = 1\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"y1; 0\"\n\n[diffusion]\nsigma = \"1\"\n",
    );
    p.start = start.to_vec();
    p.working_box = sdeldp::Bounds::cube(2, -50.0, 50.0);
    p
}

fn tanh_ou() -> SdeProblem {
    problem(
        "[problem]\nname = \"tanh-ou\"\nlayout = \"nondegenerate\"\ndim = 1\nhorizon = 1.0\nellipticity_k = 2.0\n\n\
         [drift]\nlimit = \"-x1\"\n\n[singular]\nfield = \"tanh(x1)\"\n\n[diffusion]\nsigma = \"1\"\n",
    )
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn noiseless_path_follows_the_linear_flow() {
    let mut p = registry::bundled("ou-1d").unwrap();
    p.start = vec![1.5];
    let n = 200;
    let s = simulate_original(&p, 0.0, n, 3).unwrap();
    let dt = p.horizon / n as f64;
    let err = s
        .times
        .iter()
        .zip(&s.states)
        .map(|(t, x)| (x[0] - 1.5 * (-t).exp()).abs())
        .fold(0.0, f64::max);
    // L = 1, T = 1
    assert!(err < 5.0 * dt, "{err}");
    assert_eq!(s.states[0], p.start);
}

#[test]
fn brownian_marginal_moments() {
    let p = registry::bundled("brownian-1d").unwrap();
    let n = 100_000u64;
    let t = p.horizon;
    let mut xs = Vec::with_capacity(n as usize);
    for path in 0..n {
        let mut last = 0.0;
        stream_path(&p, 1.0, 10, 17, path, |k, z| {
            if k == 10 {
                last = z[0];
            }
            true
        })
        .unwrap();
        xs.push(last - p.start[0]);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 4.0 * (t / n as f64).sqrt(), "{mean}");
    assert!((var / t - 1.0).abs() <= 0.05, "{var}");
}

#[test]
fn euler_maruyama_self_convergence() {
    let p = tanh_ou();
    let m = 1;
    let n_fine = 512;
    let dt = p.horizon / n_fine as f64;
    let levels = [64, 128, 256, 512];
    let mut errs = [0.0f64; 3];
    for path in 0..100 {
        let fine = brownian_increments(5, path, n_fine, m, dt);
        let runs: Vec<_> = levels
            .iter()
            .map(|&n| simulate_with_increments(&p, 0.5, n, &coarsen(&fine, m, n_fine / n)).unwrap())
            .collect();
        for j in 0..3 {
            let (a, b) = (&runs[j], &runs[j + 1]);
            let e = a
                .states
                .iter()
                .enumerate()
                .map(|(k, x)| (x[0] - b.states[2 * k][0]).abs())
                .fold(0.0, f64::max);
            errs[j] += e / 100.0;
        }
    }
    for w in errs.windows(2) {
        let r = w[0] / w[1];
        assert!((1.2..=2.8).contains(&r), "{errs:?}");
    }
}

#[test]
fn zero_map_transformed_path_is_bitwise_identical() {
    let p = registry::bundled("ou-1d").unwrap();
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 65), 1.0, 2.0, 1e-10).unwrap();
    let t = transform(&p, Arc::new(l0.map.clone())).unwrap();
    for seed in [0, 1, 99] {
        let x = simulate_original(&p, 0.3, 50, seed).unwrap();
        let y = simulate_transformed(&t, 0.3, 50, seed).unwrap();
        assert_eq!(x.states, y.states);
    }
    let c = conjugacy_check(&p, Arc::new(l0.map), 0.3, 50, 4, 10).unwrap();
    assert_eq!(c.max, 0.0);
}

#[test]
fn noiseless_transformed_path_ignores_the_seed() {
    let p = tanh_ou();
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 257), 1.0, 2.0, 1e-10).unwrap();
    let t = transform(&p, Arc::new(l0.map)).unwrap();
    let a = simulate_transformed(&t, 0.0, 40, 1).unwrap();
    let b = simulate_transformed(&t, 0.0, 40, 2).unwrap();
    assert_eq!(a.states, b.states);
}

#[test]
fn constant_singular_drift_shifts_the_path() {
    let c = 0.7;
    let p = constant_drift_problem(&[c]).unwrap();
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 129), 1.0, 2.0, 1e-10).unwrap();
    let shift = c / l0.lambda0;
    let t = transform(&p, Arc::new(l0.map)).unwrap();
    for seed in 0..5 {
        let x = simulate_original(&p, 0.2, 50, seed).unwrap();
        let y = simulate_transformed(&t, 0.2, 50, seed).unwrap();
        for (a, b) in x.states.iter().zip(&y.states) {
            assert!((b[0] - a[0] - shift).abs() < 1e-8);
        }
    }
}

#[test]
fn noiseless_integrator_is_affine() {
    let p = integrator([0.5, -0.75]);
    let s = simulate_degenerate(&p, 0.0, 64, 0).unwrap();
    for (t, z) in s.times.iter().zip(&s.states) {
        assert!((z[0] - (0.5 - 0.75 * t)).abs() < 1e-14);
        assert_eq!(z[1], -0.75);
    }
}

#[test]
fn integrated_brownian_motion_has_variance_t_cubed_over_three() {
    let p = integrator([0.0, 0.0]);
    let n = 100_000u64;
    let mut xs = Vec::with_capacity(n as usize);
    for path in 0..n {
        let mut last = 0.0;
        stream_path(&p, 1.0, 100, 8, path, |k, z| {
            if k == 100 {
                last = z[0];
            }
            true
        })
        .unwrap();
        xs.push(last);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / (1.0 / 3.0) - 1.0).abs() <= 0.05, "{var}");
}

#[test]
fn position_block_has_no_quadratic_variation() {
    let p = integrator([0.0, 0.0]);
    let s = simulate_degenerate(&p, 1.0, 200, 12).unwrap();
    let dt = s.dt;
    let sup_y = s.states.iter().map(|z| z[1].abs()).fold(0.0, f64::max);
    for w in s.states.windows(2) {
        let dx = (w[1][0] - w[0][0]).abs();
        assert!(dx <= sup_y * dt * (1.0 + 1e-12));
        assert!((dx - w[0][1].abs() * dt).abs() <= 1e-15);
    }
}

#[test]
fn position_update_never_reads_the_noise() {
    let p = registry::bundled("hamiltonian-2d").unwrap();
    let mut buf = StepBuffers::new(2, 1);
    for z0 in [[0.1, 0.2], [-1.0, 0.7], [2.0, -1.5]] {
        let mut a = z0;
        let mut b = z0;
        em_step(&p, 0.5, 0.01, &mut a, &[0.3], &mut buf).unwrap();
        em_step(&p, 0.5, 0.01, &mut b, &[-2.0], &mut buf).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }
}

#[test]
fn tanh_conjugacy_shrinks_under_refinement() {
    let p = registry::bundled("dini-tanhlog-1d").unwrap();
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 257), 1.0, 2.0, 1e-10).unwrap();
    let levels = conjugacy_refinement(&p, Arc::new(l0.map), 0.5, 25, 4, 0, 50).unwrap();
    for w in levels.windows(2) {
        let r = w[0].mean / w[1].mean;
        assert!(r >= 1.15, "{levels:?}");
    }
}

#[test]
fn noiseless_conjugacy_is_integrator_mismatch() {
    let p = tanh_ou();
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 257), 1.0, 2.0, 1e-10).unwrap();
    let n = 100;
    let c = conjugacy_check(&p, Arc::new(l0.map), 0.0, n, 0, 1).unwrap();
    let dt = p.horizon / n as f64;
    // |b1| <= |x| <= 1 along the flow from the start point
    let coeff = p.start[0].abs().max(1.0);
    assert!(c.max < 1e-2 * dt * n as f64 * coeff, "{}", c.max);
}

#[test]
fn batches_do_not_depend_on_the_thread_count() {
    let p = registry::bundled("dini-tanhlog-1d").unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_batch(&p, 0.3, 40, 21, 32).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.paths.len(), b.paths.len());
    for (x, y) in a.paths.iter().zip(&b.paths) {
        assert_eq!(x.states, y.states);
    }
}

#[test]
fn increments_have_the_right_moments() {
    let n = 1_000_000;
    let dt = 0.01;
    let w = brownian_increments(42, 0, n, 1, dt);
    let mean = w.iter().sum::<f64>() / n as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 4.0 * dt.sqrt() / (n as f64).sqrt(), "{mean}");
    assert!((var / dt - 1.0).abs() < 0.01, "{var}");
}

#[test]
fn noise_vanishes_as_epsilon_goes_to_zero() {
    let p = tanh_ou();
    let n = 100;
    let dt = p.horizon / n as f64;
    let mut gaps = [0.0; 3];
    for path in 0..20 {
        let w = brownian_increments(9, path, n, 1, dt);
        let x0 = simulate_with_increments(&p, 0.0, n, &w).unwrap();
        for (j, eps) in [0.1, 0.01, 0.001].into_iter().enumerate() {
            let x = simulate_with_increments(&p, eps, n, &w).unwrap();
            gaps[j] += sup_diff(&x.states, &x0.states) / 20.0;
        }
    }
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] < 0.1);
}

#[test]
fn escape_is_reported_with_the_step() {
    let mut p = registry::bundled("brownian-1d").unwrap();
    p.working_box = sdeldp::Bounds::cube(1, -0.01, 0.01);
    p.start = vec![0.0];
    match simulate_original(&p, 0.9, 1000, 0) {
        Err(SimError::Escaped { step, .. }) => assert!(step >= 1),
        r => panic!("{:?}", r.map(|s| s.terminal().to_vec())),
    }
}
