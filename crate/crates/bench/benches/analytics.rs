use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use monkeys_core::analytics::{coverage_at_k, score_subsets};

fn coverage(c: &mut Criterion) {
    // a benchmark-sized dataset: 500 instances, 250 samples each
    let counts: Vec<(usize, usize)> = (0..500).map(|i| (250, (i * 37) % 251)).collect();
    let mut group = c.benchmark_group("coverage_at_k");
    for k in [1, 10, 100, 250] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| b.iter(|| coverage_at_k(&counts, k).unwrap()));
    }
    group.finish();
}

fn subsets(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_subsets");
    group.bench_function("exhaustive 12 choose 6", |b| b.iter(|| score_subsets(12, 6, 1)));
    group.bench_function("sampled 40 choose 10", |b| b.iter(|| score_subsets(40, 10, 1)));
    group.finish();
}

criterion_group!(benches, coverage, subsets);
criterion_main!(benches);
