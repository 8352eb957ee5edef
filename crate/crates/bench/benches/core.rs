use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use sdeldp::action::minimize_rate;
use sdeldp::model::{parse_field, registry};
use sdeldp::simulate::{simulate_batch, simulate_transformed};
use sdeldp::zvonkin::{find_lambda0, solve_resolvent, transform, GridSpec};
use sdeldp::{RateOptions, Region, Target};

fn expression(c: &mut Criterion) {
    let f = parse_field("sin(x1) * tanh(x2) + max(x1, 0.5); x1 * x2 / 10 - abs(x2)", 2, 2).unwrap();
    let mut out = [0.0; 2];
    c.bench_function("field eval 2d", |b| {
        b.iter(|| {
            f.eval(black_box(&[0.3, -1.2]), &mut out).unwrap();
            out[0] + out[1]
        })
    });
}

fn resolvent(c: &mut Criterion) {
    let p = registry::bundled("dini-tanhlog-1d").unwrap();
    for res in [129, 513] {
        let spec = GridSpec::for_problem(&p, res);
        c.bench_function(&format!("resolvent solve n={res}"), |b| {
            b.iter(|| solve_resolvent(&p, 16.0, &spec, 1e-10, 10_000).unwrap())
        });
    }
}

fn paths(c: &mut Criterion) {
    let p = registry::bundled("dini-tanhlog-1d").unwrap();
    c.bench_function("simulate 1000 paths x 50 steps", |b| b.iter(|| simulate_batch(&p, 0.25, 50, 0, 1000).unwrap()));
    let l0 = find_lambda0(&p, &GridSpec::for_problem(&p, 257), 1.0, 2.0, 1e-10).unwrap();
    let t = transform(&p, Arc::new(l0.map)).unwrap();
    c.bench_function("transformed path x 50 steps", |b| b.iter(|| simulate_transformed(&t, 0.25, 50, 0).unwrap()));
}

fn rate(c: &mut Criterion) {
    let p = registry::bundled("ou-1d").unwrap();
    let target = Target::Region(Region::Ball { center: vec![1.0], radius: 0.0 });
    let mut g = c.benchmark_group("rate");
    g.sample_size(10);
    g.bench_function("ou-1d 20 intervals 4 restarts", |b| {
        b.iter(|| minimize_rate(&p, &target, 20, 4, 0, &RateOptions::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, expression, resolvent, paths, rate);
criterion_main!(benches);
