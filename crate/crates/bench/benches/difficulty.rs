use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dds_bench::{attention_rows, logprobs};
use dds_core::difficulty::{importance_from_attention, weighted_ppl, Aggregation};
use dds_core::scorer::AttentionBlock;

fn weighted(c: &mut Criterion) {
    let mut group = c.benchmark_group("weighted_ppl");
    for &n in &[64, 512, 2048] {
        let lps = logprobs(n, 3);
        let block = AttentionBlock::new(attention_rows(n, 4)).unwrap();
        let importance = importance_from_attention(&block, Aggregation::Mean).unwrap();
        group.bench_with_input(BenchmarkId::new("score", n), &n, |b, _| b.iter(|| weighted_ppl(&lps, &importance).unwrap()));
        group.bench_with_input(BenchmarkId::new("importance_mean", n), &n, |b, _| {
            b.iter(|| importance_from_attention(&block, Aggregation::Mean).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, weighted);
criterion_main!(benches);
