//! Parallel pool against a single-thread pool on the two data-parallel
//! stages: tree training and query answering.

use criterion::{criterion_group, criterion_main, Criterion};

use hreid::data::Split;
use hreid::engine::{index_gallery, query_all, AttributeSource};
use hreid::pipeline::{load_data, train_model, ModelKind, RunConfig};

fn config() -> RunConfig {
    serde_json::from_str(
        r#"{
          "data": {"synth": {"n_identities": 40, "images_per_identity": 30}},
          "build": {"min_node_samples": 30, "max_depth": 3},
          "triplet": {"max_epochs": 4},
          "head": {"epochs": 10}
        }"#,
    )
    .unwrap()
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let cfg = config();
    let data = load_data(&cfg).unwrap();
    let gallery = data.split(Split::Gallery);
    let queries = data.split(Split::Query);
    let tree = train_model(&cfg, &data, ModelKind::Hierarchical).unwrap().hierarchy;
    let index = index_gallery(&tree, &gallery, AttributeSource::Predicted).unwrap();

    let mut train = c.benchmark_group("train_hierarchy");
    train.sample_size(10);
    for (name, pool) in pools() {
        train.bench_function(name, |b| {
            b.iter(|| pool.install(|| train_model(&cfg, &data, ModelKind::Hierarchical).unwrap()))
        });
    }
    train.finish();

    let mut query = c.benchmark_group("query_all");
    for (name, pool) in pools() {
        query.bench_function(name, |b| b.iter(|| pool.install(|| query_all(&tree, &index, &queries, 10).unwrap())));
    }
    query.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
