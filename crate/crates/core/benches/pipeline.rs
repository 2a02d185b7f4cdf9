use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use synthrecord::exec::Execution;
use synthrecord::fill::{Pipeline, SystemPreset};
use synthrecord::fixture::generate_fixture_corpus;
use synthrecord::mlm::{train_native, TrainingConfig};
use synthrecord::resemblance::{pair_documents, resemblance_reports, HashedProjection, Stopwords, DEFAULT_TOPK};

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn generation(c: &mut Criterion) {
    let corpus = generate_fixture_corpus(7, 40).unwrap();
    let model = train_native(&generate_fixture_corpus(11, 100).unwrap(), &TrainingConfig::default()).unwrap();
    let pipeline = Pipeline::with_defaults(Arc::new(model));
    let mut group = c.benchmark_group("generate_40_letters");
    group.sample_size(10);
    for preset in ["S_0.7", "I_0.7"] {
        let preset = SystemPreset::named(preset).unwrap();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, &preset.name), &exec, |b, &exec| {
                b.iter(|| black_box(pipeline.generate_corpus(&corpus, &preset, 1, 1, exec).unwrap()))
            });
        }
    }
    group.finish();

    let synthetic: Vec<_> = pipeline
        .generate_corpus(
            &corpus,
            &SystemPreset::named("S_0.7").unwrap(),
            1,
            1,
            Execution::default(),
        )
        .unwrap()
        .into_iter()
        .map(|g| g.synthetic)
        .collect();
    let pairs = pair_documents(&corpus, &synthetic).unwrap();
    let provider = HashedProjection::default();
    let stopwords = Stopwords::shipped();
    let mut group = c.benchmark_group("resemblance_40_pairs");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(name, |b| {
            b.iter(|| black_box(resemblance_reports(&pairs, &provider, &stopwords, &DEFAULT_TOPK, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, generation);
criterion_main!(benches);
