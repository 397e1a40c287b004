use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ecbr_core::workload::{generate, Profile, WorkloadSpec};
use ecbr_core::ContainmentIndex;

fn batch_matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("match_batch");
    for (name, profile) in [("chains8", Profile::Chains(8)), ("zipf", Profile::Zipf), ("tree8", Profile::Tree(8))] {
        let spec = WorkloadSpec { n_subscriptions: 20_000, profile, n_publications: 2_000, seed: 3, ..Default::default() };
        let w = generate(&spec).unwrap();
        let mut ix = ContainmentIndex::new();
        for s in w.subscriptions {
            ix.insert(s).unwrap();
        }
        group.throughput(Throughput::Elements(w.publications.len() as u64));
        group.bench_with_input(BenchmarkId::new("sequential", name), &w.publications, |b, pubs| {
            b.iter(|| ix.match_batch_sequential(pubs))
        });
        group.bench_with_input(BenchmarkId::new(if ecbr_core::par::PARALLEL { "rayon" } else { "fallback" }, name), &w.publications, |b, pubs| {
            b.iter(|| ix.match_batch(pubs))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_matching);
criterion_main!(benches);
