use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use rtc_bench::stock_fixture;
use rtc_core::inference::{rtc_predict, CompetenceLevel};
use rtc_core::model::forward;
use rtc_core::training::loss_gradient;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_forward(c: &mut Criterion) {
    let f = stock_fixture();
    let leaves = f.taxonomy.leaf_label_set();
    c.bench_function("forward_full_leaf_posterior", |b| {
        b.iter(|| {
            forward(
                black_box(f.test.feature(0)),
                &leaves,
                &f.taxonomy,
                &f.params,
                &f.fmap,
            )
            .unwrap()
        })
    });
}

fn bench_sample_cut(c: &mut Criterion) {
    let f = stock_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("sample_cut", |b| {
        b.iter(|| f.taxonomy.sample_cut(black_box(0.5), &mut rng))
    });
}

fn bench_loss_gradient(c: &mut Criterion) {
    let f = stock_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cut = f.taxonomy.sample_cut(0.5, &mut rng);
    let idx: Vec<usize> = (0..32).collect();
    c.bench_function("loss_gradient_batch32", |b| {
        b.iter(|| {
            loss_gradient(
                black_box(&f.train),
                &idx,
                &cut,
                &f.taxonomy,
                &f.params,
                &f.fmap,
                1.0,
            )
            .unwrap()
        })
    });
}

fn bench_predict(c: &mut Criterion) {
    let f = stock_fixture();
    let gamma = CompetenceLevel::new(0.4).unwrap();
    c.bench_function("rtc_predict_walk", |b| {
        b.iter(|| {
            rtc_predict(
                black_box(f.test.feature(0)),
                &f.taxonomy,
                &f.params,
                &f.fmap,
                gamma,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_sample_cut,
    bench_loss_gradient,
    bench_predict
);
criterion_main!(benches);
