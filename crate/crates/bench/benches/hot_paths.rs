use criterion::{black_box, criterion_group, criterion_main, Criterion};

use bal_core::data::{generate_phantom, PhantomConfig};
use bal_core::model::{self, SliceData};
use bal_core::repr::{greedy_hybrid_select, pairwise_matrices, HybridConfig, SelectionMode};
use bal_core::rng::substream;
use bal_core::uncertainty::class_uncertainty;
use bal_core::{Classifier, SampleKey};

fn phantom() -> Vec<bal_core::Volume> {
    let cfg = PhantomConfig {
        volumes: 12,
        ..PhantomConfig::default()
    };
    generate_phantom(42, &cfg).unwrap()
}

fn bench_forward(c: &mut Criterion) {
    let volumes = phantom();
    let slice = SliceData::from_volume(&volumes[0], 8);
    let mut rng = substream(1, "bench-init", 0);
    let model = Classifier::new(model::FEATURE_DIM, 64, 4, 0.5, &mut rng);
    c.bench_function("mlp_deterministic_slice", |b| {
        b.iter(|| black_box(model.predict_deterministic(black_box(&slice))))
    });
    c.bench_function("mlp_mc10_slice", |b| {
        b.iter(|| black_box(model.predict_mc(black_box(&slice), 10, 7)))
    });
}

fn bench_uncertainty(c: &mut Criterion) {
    let volumes = phantom();
    let slice = SliceData::from_volume(&volumes[0], 8);
    let mut rng = substream(2, "bench-init", 0);
    let model = Classifier::new(model::FEATURE_DIM, 64, 4, 0.5, &mut rng);
    let samples = model.predict_mc(&slice, 10, 7);
    c.bench_function("class_uncertainty_10x5x4096", |b| {
        b.iter(|| black_box(class_uncertainty(black_box(&samples))))
    });
}

fn bench_selection(c: &mut Criterion) {
    let volumes = phantom();
    let keys: Vec<SampleKey> = volumes.iter().map(|v| SampleKey::volume(&v.id)).collect();
    let lookup = |id: &str| volumes.iter().find(|v| v.id == id);
    let candidates = keys[..4].to_vec();
    let training = keys[10..].to_vec();
    let unlabeled = keys[..10].to_vec();
    c.bench_function("pairwise_matrices_4x10", |b| {
        b.iter(|| {
            black_box(pairwise_matrices(lookup, &candidates, &unlabeled, &training, 32).unwrap())
        })
    });
    let (sim, mi) = pairwise_matrices(lookup, &candidates, &unlabeled, &training, 32).unwrap();
    let cfg = HybridConfig {
        lambda: 0.5,
        k: 2,
        mode: SelectionMode::Hybrid,
    };
    c.bench_function("greedy_hybrid_select_k2", |b| {
        b.iter(|| black_box(greedy_hybrid_select(black_box(&sim), &mi, &cfg).unwrap()))
    });
}

fn bench_features(c: &mut Criterion) {
    let volumes = phantom();
    let v = &volumes[0];
    c.bench_function("extract_features_64x64", |b| {
        b.iter(|| {
            black_box(model::extract_features(
                black_box(v.slice_intensities(8)),
                v.height,
                v.width,
            ))
        })
    });
}

criterion_group!(benches, bench_forward, bench_uncertainty, bench_selection, bench_features);
criterion_main!(benches);
