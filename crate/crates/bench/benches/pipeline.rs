use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ddsc_bench::default_scenario;
use ddsc_core::controller::compatible_pairs;
use ddsc_core::lmi::synth_gain;
use ddsc_core::simulate::run_closed_loop;
use ddsc_core::{RunOptions, Tolerance};
use std::hint::black_box;

fn synthesis(c: &mut Criterion) {
    let (scenario, _) = default_scenario();
    let tol = Tolerance::default();
    c.bench_function("synth_gain n5 m3 T7", |b| {
        b.iter(|| synth_gain(black_box(&scenario.init[0]), 0.8, &tol, tol.psd_margin).unwrap())
    });
}

fn compatibility(c: &mut Criterion) {
    let (scenario, _) = default_scenario();
    let tol = Tolerance::default();
    c.bench_function("pairwise compatibility p5", |b| {
        b.iter(|| compatible_pairs(black_box(&scenario.init), &tol).unwrap())
    });
}

fn closed_loop(c: &mut Criterion) {
    let (scenario, library) = default_scenario();
    let opts = RunOptions::new(1.0);
    let mut seed = 0u64;
    c.bench_function("closed loop horizon 100", |b| {
        b.iter_batched(
            || {
                seed += 1;
                (seed, scenario.config.initial_state(seed))
            },
            |(s, x0)| run_closed_loop(&scenario.plant, &library, &x0, 100, s, &opts).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, synthesis, compatibility, closed_loop);
criterion_main!(benches);
