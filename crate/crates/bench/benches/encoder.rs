use asymdistill_bench::{depth_ladder, toy};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn encode_by_depth(c: &mut Criterion) {
    let ds = toy();
    let models = depth_ladder(&ds);
    let mut group = c.benchmark_group("encode");
    group.sample_size(10);
    for batch in [4usize, 64] {
        let queries = &ds.distill_queries[..batch];
        group.throughput(Throughput::Elements(batch as u64));
        for (label, model) in &models {
            group.bench_with_input(BenchmarkId::new(label.as_str(), batch), &queries, |b, q| {
                b.iter(|| {
                    let enc = model.tokenize_batch(q).unwrap();
                    model.embed_encoded(&enc).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn tokenize(c: &mut Criterion) {
    let ds = toy();
    let queries = &ds.distill_queries[..64];
    c.bench_function("tokenize/64", |b| b.iter(|| ds.vocab.batch_encode(queries, 64).unwrap()));
}

criterion_group!(benches, encode_by_depth, tokenize);
criterion_main!(benches);
