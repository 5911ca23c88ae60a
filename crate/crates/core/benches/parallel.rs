//! Sequential against parallel: population sampling and batch evaluation.
//! On a single core the two lines should match; the gap grows with cores.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use einspace::grammar::{build_grammar, Variant};
use einspace::parallel::{map_indexed, map_indexed_seq};
use einspace::rng::RandomSource;
use einspace::sampling::{sample_with_retries, SampleLimits};
use einspace::search::{EvaluatorConfig, FitnessEvaluator, TaskId};

fn sampling(c: &mut Criterion) {
    let g = build_grammar(Variant::TwoD, 0.5).unwrap();
    let bp = TaskId::ImPatterns.blueprint();
    let limits = SampleLimits::default();
    let root = RandomSource::new(1);
    let draw = |i: usize| sample_with_retries(&g, &bp, &mut root.split(i as u64), &limits, 20).ok();
    let mut group = c.benchmark_group("sample_population");
    for n in [256usize, 1024] {
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| b.iter(|| map_indexed_seq(n, draw)));
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| b.iter(|| map_indexed(n, draw)));
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let g = build_grammar(Variant::TwoD, 0.5).unwrap();
    let bp = TaskId::ImPatterns.blueprint();
    let limits = SampleLimits { max_parameters: 1_000_000, ..SampleLimits::default() };
    let root = RandomSource::new(2);
    let trees: Vec<_> = map_indexed_seq(64, |i| sample_with_retries(&g, &bp, &mut root.split(i as u64), &limits, 20).unwrap());
    let ev = FitnessEvaluator::new(EvaluatorConfig::Validity, g, limits);
    let score = |i: usize| ev.evaluate(&trees[i], i as u64).map(|e| e.fitness).unwrap_or(0.0);
    let mut group = c.benchmark_group("evaluate_batch");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| map_indexed_seq(trees.len(), score)));
    group.bench_function("parallel", |b| b.iter(|| map_indexed(trees.len(), score)));
    group.finish();
}

criterion_group!(benches, sampling, evaluation);
criterion_main!(benches);
