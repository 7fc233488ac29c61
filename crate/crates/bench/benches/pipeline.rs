use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sparsevar::{cost_report, interpolate_channels, FeatureGrid, MetricKind, SparsifierParams, StackConfig, ToyStack};

fn stack() -> ToyStack {
    ToyStack::build(&StackConfig::default()).expect("default stack")
}

fn runs(c: &mut Criterion) {
    let stack = stack();
    let pipe = stack.pipeline();
    let params = SparsifierParams::default();
    let mut g = c.benchmark_group("run");
    g.sample_size(20);
    g.bench_function("dense", |b| b.iter(|| pipe.run_dense(params.selected_block).unwrap()));
    for metric in MetricKind::ALL {
        g.bench_with_input(BenchmarkId::new("sparse", metric.name()), &metric, |b, &m| {
            b.iter(|| pipe.run_sparse_with(black_box(&params), m).unwrap())
        });
    }
    g.finish();
}

fn alpha(c: &mut Criterion) {
    let stack = stack();
    let pipe = stack.pipeline();
    let mut g = c.benchmark_group("sparse_alpha");
    g.sample_size(20);
    for a in [2, 4, 8] {
        let params = SparsifierParams {
            alpha: a,
            ..SparsifierParams::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(a), &params, |b, p| {
            b.iter(|| pipe.run_sparse(p).unwrap())
        });
    }
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let src = FeatureGrid::from_fn(24, 24, 16, |i, j| {
        (0..16).map(|ch| ((i * 31 + j * 7 + ch) % 13) as f64).collect()
    })
    .unwrap();
    c.bench_function("interpolate_24_to_32_c16", |b| {
        b.iter(|| interpolate_channels(black_box(&src), 32, 32).unwrap())
    });

    let stack = stack();
    let run = stack.pipeline().run_sparse(&SparsifierParams::default()).unwrap();
    c.bench_function("cost_report", |b| {
        b.iter(|| cost_report(black_box(&run.stats), 4, 8).unwrap())
    });
}

criterion_group!(benches, runs, alpha, kernels);
criterion_main!(benches);
