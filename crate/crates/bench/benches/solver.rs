use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tsfl_bench::{balanced_queue, envy_market, market};
use tsfl_core::envy::solve_envy;
use tsfl_core::lp::{build_base_lp, solve_lp, LP_TOL};
use tsfl_core::queueing::{abandonment_probability, DEFAULT_TAIL_TOL};
use tsfl_core::{solve, MicroLpBackend, Objective, SolverConfig};

fn base_lp(c: &mut Criterion) {
    let mut group = c.benchmark_group("base_lp");
    for n in [4, 8, 12] {
        let inst = market(n, 9);
        group.bench_with_input(BenchmarkId::from_parameter(n), &inst, |b, inst| {
            b.iter(|| {
                let model = build_base_lp(inst, Objective::Surplus).unwrap();
                solve_lp(&model, &MicroLpBackend, LP_TOL).unwrap()
            })
        });
    }
    group.finish();
}

fn full_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    for n in [4, 6] {
        let inst = market(n, 5);
        let config = SolverConfig { jobs: 1, ..SolverConfig::default() };
        group.bench_with_input(BenchmarkId::from_parameter(n), &inst, |b, inst| b.iter(|| solve(inst, &config).unwrap()));
    }
    group.finish();
}

fn envy(c: &mut Criterion) {
    let inst = envy_market(4);
    c.bench_function("envy_solve/4", |b| b.iter(|| solve_envy(&inst, &MicroLpBackend).unwrap()));
}

fn queue(c: &mut Criterion) {
    let mut group = c.benchmark_group("abandonment");
    for rate in [1.0, 10.0, 100.0] {
        let params = balanced_queue(rate);
        group.bench_with_input(BenchmarkId::from_parameter(rate), &params, |b, p| {
            b.iter(|| abandonment_probability(p, DEFAULT_TAIL_TOL).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, base_lp, full_solve, envy, queue);
criterion_main!(benches);
