//! Rayon vs sequential throughput on the data-parallel inner loops:
//! corpus generation, frozen-model case evaluation, and the per-region
//! retrieval scan. Both paths call the same per-item functions, so the
//! comparison isolates the execution strategy.

use bigen::bank::{build_bank, KnowledgeBank};
use bigen::corpus::{generate_corpus, split_dataset, Corpus, CorpusConfig, SplitManifest};
use bigen::retrieval::{retrieve_region, RetrievalConfig};
use bigen::tensor::{Graph, LeafCache};
use bigen::trainer::{case_loss, Model, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::prelude::*;
use std::hint::black_box;

fn corpus_fixture() -> (Corpus, SplitManifest, KnowledgeBank) {
    let corpus = generate_corpus(&CorpusConfig {
        n_cases: 64,
        patches_min: 64,
        patches_max: 128,
        dim: 32,
        seed: 7,
        ..CorpusConfig::default()
    })
    .unwrap();
    let splits = split_dataset(&corpus, 7).unwrap();
    let bank = build_bank(&corpus, &splits, "train").unwrap();
    (corpus, splits, bank)
}

fn bench_corpus_generation(c: &mut Criterion) {
    let cfg = CorpusConfig {
        n_cases: 32,
        patches_min: 64,
        patches_max: 128,
        dim: 32,
        ..CorpusConfig::default()
    };
    let mut group = c.benchmark_group("corpus_generation");
    group.sample_size(10);
    // The library path dispatches on the `parallel` feature (enabled for
    // benches); the sequential reference forces single-threaded rayon.
    group.bench_function(BenchmarkId::new("generate", "parallel"), |b| {
        b.iter(|| black_box(generate_corpus(&cfg).unwrap()))
    });
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    group.bench_function(BenchmarkId::new("generate", "sequential"), |b| {
        b.iter(|| pool.install(|| black_box(generate_corpus(&cfg).unwrap())))
    });
    group.finish();
}

fn bench_case_forward(c: &mut Criterion) {
    let (corpus, _, bank) = corpus_fixture();
    let mut cfg = TrainConfig::default();
    cfg.encoder.dim = 32;
    let reports: Vec<&str> = corpus.cases.iter().map(|c| c.report.as_str()).collect();
    let vocab = bigen::corpus::Vocab::build(&reports, 1);
    let model: Model<f32> =
        Model::build(cfg.encoder, cfg.retrieval, corpus.meta.dim, vocab, 1).unwrap();

    let forward_one = |case: &bigen::corpus::Case| {
        let mut g = Graph::<f32>::new();
        let mut cache = LeafCache::new(&model.store, false);
        let loss = case_loss(&mut g, &mut cache, &model, case, Some(&bank)).unwrap();
        g.value(loss).data()[0]
    };

    let mut group = c.benchmark_group("batch_forward_64_cases");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let total: f32 = corpus.cases.par_iter().map(forward_one).sum();
            black_box(total)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let total: f32 = corpus.cases.iter().map(forward_one).sum();
            black_box(total)
        })
    });
    group.finish();
}

fn bench_retrieval_scan(c: &mut Criterion) {
    let (corpus, _, bank) = corpus_fixture();
    let retrieval = RetrievalConfig::default();
    // one query region per case: mean of its first 20 retrieval embeddings
    let queries: Vec<Vec<f64>> = corpus
        .cases
        .iter()
        .map(|case| {
            let take = case.retrieval.len().min(20);
            let d = corpus.meta.dim;
            let mut mean = vec![0.0f64; d];
            for row in &case.retrieval[..take] {
                for (acc, &v) in mean.iter_mut().zip(row) {
                    *acc += v as f64 / take as f64;
                }
            }
            mean
        })
        .collect();

    let scan_one = |q: &Vec<f64>| retrieve_region(q, &bank, retrieval.v).unwrap().0[0];

    let mut group = c.benchmark_group("retrieval_scan");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let hits: Vec<usize> = queries.par_iter().map(scan_one).collect();
            black_box(hits)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let hits: Vec<usize> = queries.iter().map(scan_one).collect();
            black_box(hits)
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_corpus_generation,
    bench_case_forward,
    bench_retrieval_scan
);
criterion_main!(benches);
