use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use matcha_bench::sample;
use matcha_core::device_map::refine_latencies;
use matcha_core::pipeline::{assign, run_end_to_end, RunConfig};
use matcha_core::tile_alloc::{solve, SolveMode};
use matcha_core::{apply_assignment, plan, simulate, TileConfig};
use std::hint::black_box;

fn config(tiles: usize) -> RunConfig {
    RunConfig { tiles: TileConfig::uniform(tiles), verify: false, ..RunConfig::default() }
}

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    for name in ["toy_conv_add", "two_branch", "autoencoder"] {
        let (g, plat) = sample(name);
        let (_, _, problem, _) = assign(&g, &plat, &config(16)).unwrap();
        for (label, mode) in [("exact", SolveMode::Exact), ("greedy", SolveMode::Greedy)] {
            group.bench_with_input(BenchmarkId::new(label, name), &problem, |b, p| b.iter(|| solve(black_box(p), None, mode).unwrap()));
        }
    }
    group.finish();
}

fn schedule(c: &mut Criterion) {
    let mut group = c.benchmark_group("plan_and_simulate");
    for name in ["two_branch", "resnet_block"] {
        let (g, plat) = sample(name);
        let (graph, matches, _, a) = assign(&g, &plat, &config(16)).unwrap();
        let tg = apply_assignment(&graph, &matches, &a.tiles).unwrap();
        let lat = refine_latencies(&tg, &plat).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let p = plan(black_box(&tg), &lat, &plat).unwrap();
                simulate(&p, &plat).unwrap().makespan_cycles
            })
        });
    }
    group.finish();
}

fn end_to_end(c: &mut Criterion) {
    let mut group = c.benchmark_group("end_to_end");
    group.sample_size(10);
    for name in ["toy_conv_add", "two_branch", "depthwise_net"] {
        let (g, plat) = sample(name);
        group.bench_function(name, |b| b.iter(|| run_end_to_end(black_box(&g), &plat, &config(16)).unwrap().plan.makespan_cycles));
    }
    group.finish();
}

criterion_group!(benches, solver, schedule, end_to_end);
criterion_main!(benches);
