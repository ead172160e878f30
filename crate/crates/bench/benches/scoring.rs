use ckafscil::losses::weighted_loss_and_grad;
use ckafscil::primitives::replace_all;
use ckafscil::{linear_cka, CompositionScorer, FeatureMap, Hyperparams, Matrix};
use ckafscil_bench::{feature_maps, model};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn cka(c: &mut Criterion) {
    let mut group = c.benchmark_group("linear_cka");
    for dim in [64, 512] {
        let x = feature_maps(0, 1, 64, dim, 1).remove(0);
        let m = model(1, 1, 16, dim);
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| linear_cka(black_box(x.x()), black_box(m.bank.block(0))).unwrap())
        });
    }
    group.finish();
}

fn scorer(c: &mut Criterion) {
    let mut group = c.benchmark_group("composition_scorer");
    group.sample_size(10);
    let (classes, dim, maps) = (100, 512, 100);
    let m = model(2, classes, 16, dim);
    let xs = feature_maps(3, maps, 64, dim, classes);
    let refs: Vec<&Matrix> = xs.iter().map(FeatureMap::x).collect();
    let scorer = CompositionScorer::new(m.bank.blocks().iter(), 0.8).unwrap();
    group.throughput(Throughput::Elements(maps as u64));
    group.bench_function("score_100_maps", |b| {
        b.iter(|| scorer.score_batch(black_box(&refs)).unwrap())
    });
    group.bench_function("build_100_classes", |b| {
        b.iter(|| CompositionScorer::new(black_box(m.bank.blocks()).iter(), 0.8).unwrap())
    });
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad");
    group.sample_size(10);
    let hp = Hyperparams::default();
    let classes = 20;
    let m = model(4, classes, hp.n_prims, 32);
    let xs = feature_maps(5, hp.batch_size, 16, 32, classes);
    let refs: Vec<&FeatureMap> = xs.iter().collect();
    let weights = ckafscil::losses::LossWeights::from_hyperparams(&hp);
    group.bench_function("batch_64_classes_20", |b| {
        b.iter(|| {
            weighted_loss_and_grad(&refs, &m.bank, &m.weights, &m.donors, &hp, &m.mask, weights)
                .unwrap()
        })
    });
    group.bench_function("replace_all_classes_20", |b| {
        b.iter(|| replace_all(black_box(&m.bank), &m.donors, hp.gamma).unwrap())
    });
    group.finish();
}

criterion_group!(benches, cka, scorer, training);
criterion_main!(benches);
