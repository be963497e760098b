use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fuelhjb_core::oracle::{optimize_trajectory, OptimizerSettings};
use fuelhjb_core::solver::{initial_condition, slice_speeds, Grid, SolverConfig, Stepper};
use fuelhjb_core::{CaraEnvelope, ConvexCost, MarketModel, Utility};

fn grid(n: usize) -> Grid {
    Grid {
        x_min: -0.25,
        x_max: 1.25,
        n_x: n,
        r_min: -4.0,
        r_max: 2.0,
        n_r: n,
        t_init: 0.05,
        horizon: 1.0,
        n_t: 0,
    }
}

fn conjugates(c: &mut Criterion) {
    let zs: Vec<f64> = (0..1024).map(|k| -20.0 + 40.0 * k as f64 / 1023.0).collect();
    let v: Vec<f64> = (0..=120).map(|k| -3.0 + 0.05 * k as f64).collect();
    let f = v.iter().map(|x| x * x + 0.3 * x.powi(4)).collect();
    let costs = [
        ("quadratic", ConvexCost::quadratic(1.0).unwrap()),
        ("power", ConvexCost::power(1.5, 1.0).unwrap()),
        ("tabulated", ConvexCost::tabulated(v, f).unwrap()),
    ];
    let mut group = c.benchmark_group("conjugate");
    for (name, cost) in &costs {
        group.bench_function(*name, |b| b.iter(|| zs.iter().map(|&z| cost.conjugate(black_box(z))).sum::<f64>()));
    }
    group.finish();
}

fn solver_step(c: &mut Criterion) {
    let market = MarketModel::scalar(0.5, 0.0).unwrap();
    let utility = Utility::mixture(0.5, 1.0, 2.0).unwrap();
    let cost = ConvexCost::quadratic(1.0).unwrap();
    let mut group = c.benchmark_group("solver_step");
    group.sample_size(20);
    for n in [101, 201] {
        let g = grid(n);
        let config = SolverConfig::new(g);
        let env = CaraEnvelope::new(&utility, &market, &cost, g.t_init, g.horizon, &g.xs()).unwrap();
        let w = initial_condition(&g, 0.0, -1e4, &market, &utility, &cost).unwrap();
        let s = slice_speeds(&config, &w, g.t_init, &market, &utility, &cost).unwrap();
        let (ax, ar) = (1.2 * s.max_speed, 1.2 * s.max_r_speed);
        let load = g.dr().powi(-2) * 0.5 * 0.25 * 1.25f64.powi(2) + ax / g.dx() + ar / g.dr();
        let stepper = Stepper::new(&config, 0.5 / load, ax, ar, &market, &utility, &cost, Some(&env)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &w, |b, w| {
            b.iter(|| stepper.step(black_box(w), g.t_init).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let market = MarketModel::scalar(0.5, 0.0).unwrap();
    let cost = ConvexCost::power(1.5, 1.0).unwrap();
    let mut group = c.benchmark_group("optimize_trajectory");
    group.sample_size(10);
    for n in [100, 400] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| optimize_trajectory(1.0, 1.0, &[1.0], n, &market, &cost, OptimizerSettings::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conjugates, solver_step, oracle);
criterion_main!(benches);
