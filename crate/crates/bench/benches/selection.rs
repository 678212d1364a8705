use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use monkeys_core::selection::{majority_vote, top_k_filter, CellOutcome, VoteMatrix};
use monkeys_core::{CandidateSample, CandidateSource, Edit};
use rand::{Rng, SeedableRng};

fn matrix(n: usize, seed: u64) -> VoteMatrix {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cands: Vec<CandidateSample> = (0..n)
        .map(|i| CandidateSample {
            candidate_id: format!("c{i:04}"),
            instance_id: "bench".into(),
            edit: Edit::from_patch("x".repeat(rng.random_range(10..200))),
            test: None,
            source: CandidateSource::Native,
            trajectory_id: None,
        })
        .collect();
    let outcomes = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| if rng.random_bool(0.4) { CellOutcome::Pass } else { CellOutcome::Fail })
                .collect()
        })
        .collect();
    VoteMatrix::from_outcomes("bench", &cands, vec!["t".into(); n], outcomes)
}

fn voting(c: &mut Criterion) {
    let mut group = c.benchmark_group("vote");
    for n in [10, 100, 500] {
        let m = matrix(n, 7);
        group.bench_with_input(BenchmarkId::new("majority", n), &m, |b, m| b.iter(|| majority_vote(m)));
        group.bench_with_input(BenchmarkId::new("top3", n), &m, |b, m| b.iter(|| top_k_filter(m, 3)));
    }
    group.finish();
}

criterion_group!(benches, voting);
criterion_main!(benches);
