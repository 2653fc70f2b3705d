use std::collections::HashSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use entropylong::corpus::TokenSequence;
use entropylong::exec::Executor;
use entropylong::retrieval::{build_index, Embedder, EmbeddingVector, HashedTfEmbedder, IndexChunk};
use entropylong::scoring::{profile_document, train_ngram, NGramConfig, NGramScorer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 2000;

fn documents(n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            // Zipf-ish token ids so the model has real structure
            let tokens: Vec<u32> = (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    2 + ((VOCAB - 2) as f64 * u.powi(3)) as u32
                })
                .collect();
            TokenSequence {
                doc_id: format!("d{i}"),
                char_offsets: vec![(0, 0); tokens.len()],
                tokens,
            }
        })
        .collect()
}

fn executors() -> Vec<(&'static str, Executor)> {
    vec![("sequential", Executor::sequential()), ("parallel", Executor::new(0))]
}

fn bench_profiling(c: &mut Criterion) {
    let docs = documents(64, 1024, 1);
    let model = train_ngram(
        docs.iter().map(|d| &d.tokens),
        &NGramConfig::new(3, 0.1, VOCAB).with_boundary(1),
    )
    .unwrap();
    let scorer = NGramScorer::new(model).with_cache_weight(0.9);

    let mut group = c.benchmark_group("profile_documents");
    group.throughput(Throughput::Elements((docs.len() * 1024) as u64));
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::new(name, exec.workers()), |b| {
            b.iter(|| exec.map(&docs, |d| profile_document(&scorer, black_box(d)).unwrap().mean))
        });
    }
    group.finish();
}

fn bench_top_k(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let words: Vec<String> = (0..5000).map(|i| format!("w{i}")).collect();
    let text = |rng: &mut ChaCha8Rng, n: usize| {
        (0..n)
            .map(|_| words[rng.random_range(0..words.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let embedder = HashedTfEmbedder::new(1024);
    let chunks: Vec<IndexChunk> = (0..2000)
        .map(|i| IndexChunk {
            doc_id: format!("c{i:05}"),
            text: text(&mut rng, 200),
            tokens: vec![0],
        })
        .collect();
    let index = build_index(chunks, &embedder).unwrap();
    let queries: Vec<EmbeddingVector> = (0..256)
        .map(|_| embedder.embed_batch(&[&text(&mut rng, 33)]).unwrap().remove(0))
        .collect();
    let exclude = HashSet::new();

    let mut group = c.benchmark_group("top_k_search");
    group.throughput(Throughput::Elements(queries.len() as u64));
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::new(name, exec.workers()), |b| {
            b.iter(|| exec.map(&queries, |q| index.search(black_box(q), 32, &exclude).unwrap().len()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_profiling, bench_top_k);
criterion_main!(benches);
