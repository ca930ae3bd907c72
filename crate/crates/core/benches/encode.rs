//! Parallel versus sequential encoding and batch gradients.
//!
//! Both variants run in one binary: "parallel" uses rayon's global pool,
//! "sequential" a single-thread pool. Building with `--no-default-features`
//! swaps the pool for plain iterators entirely.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use severity_core::backbones::{Architecture, BackboneConfig, Embedder, FeatureStore};
use severity_core::corpus::{Aspect, SeverityLevel};
use severity_core::embedding::HashEmbedder;
use severity_core::siamese::{PairExample, SiameseModel, TrainConfig};
use severity_core::synthetic::{generate, SyntheticConfig};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        ("parallel", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let ds = generate(&SyntheticConfig { documents: 64, ..SyntheticConfig::default() }).unwrap();
    let embedder = HashEmbedder::new(64).unwrap();
    let docs = || ds.instances.iter().map(|i| i.document.as_ref());

    let mut group = c.benchmark_group("featurize_64_docs");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| FeatureStore::build(docs(), Architecture::RnnTrans, Embedder::Sentence(&embedder)).unwrap()))
        });
    }
    group.finish();

    let store = FeatureStore::build(docs(), Architecture::RnnTrans, Embedder::Sentence(&embedder)).unwrap();
    let mut cfg = BackboneConfig::new(Architecture::RnnTrans, 64);
    cfg.hidden_dim = 32;
    let model = SiameseModel::new(Aspect::Violence, &cfg, true, &TrainConfig::default(), &embedder_id(&embedder)).unwrap();
    let feats: Vec<_> = ds.instances.iter().map(|i| store.get(i.movie_id()).unwrap()).collect();
    let batch: Vec<PairExample> = (0..16)
        .map(|k| PairExample {
            left: feats[2 * k],
            right: feats[2 * k + 1],
            left_label: SeverityLevel::ALL[k % 4],
            right_label: SeverityLevel::ALL[(k + 1) % 4],
        })
        .collect();

    let mut group = c.benchmark_group("joint_gradient_16_pairs");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| model.joint_loss_and_gradient(&batch).unwrap()))
        });
    }
    group.finish();
}

fn embedder_id(e: &HashEmbedder) -> String {
    use severity_core::embedding::EmbeddingProvider;
    e.id()
}

criterion_group!(benches, bench);
criterion_main!(benches);
