use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_core::encoder::{reference_tiny_encoder, EmbeddingMatrix};
use reid_core::eval::{cosine_distance_matrix, k_reciprocal_rerank, EmbeddingSet, RerankParams};
use reid_core::preprocess::NormalizedImage;

fn images(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<NormalizedImage> {
    (0..n)
        .map(|_| NormalizedImage {
            height: side,
            width: side,
            data: (0..side * side * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn embeddings(n: usize, d: usize, players: usize, rng: &mut ChaCha8Rng) -> EmbeddingSet {
    let v = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let ids = (0..n).map(|i| format!("r{i}")).collect();
    let m = EmbeddingMatrix::from_raw_rows(ids, v.outer_iter().map(|r| r.to_vec()).collect()).unwrap();
    EmbeddingSet::new(m, (0..n).map(|i| format!("p{}", i % players)).collect()).unwrap()
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("rayon", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = reference_tiny_encoder(0);
    let batch = images(64, enc.input_side(), &mut rng);
    let ids: Vec<String> = (0..batch.len()).map(|i| i.to_string()).collect();
    let q = embeddings(100, 128, 100, &mut rng);
    let g = embeddings(400, 128, 100, &mut rng);

    let mut group = c.benchmark_group("parallel");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("encode_64", name), |b| {
            pool.install(|| b.iter(|| enc.encode_normalized(&batch, &ids).unwrap()))
        });
        group.bench_function(BenchmarkId::new("cosine_100x400", name), |b| {
            pool.install(|| b.iter(|| cosine_distance_matrix(&q, &g).unwrap()))
        });
        group.bench_function(BenchmarkId::new("rerank_100x400", name), |b| {
            pool.install(|| b.iter(|| k_reciprocal_rerank(&q, &g, RerankParams::default()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
