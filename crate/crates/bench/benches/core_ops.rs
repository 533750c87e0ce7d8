use criterion::{criterion_group, criterion_main, Criterion};
use drivegaze_core::{metrics, ops, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = Tensor::random(&[8, 8, 28, 28], -1.0, 1.0, &mut rng);
    let kernel = Tensor::random(&[16, 8, 3, 3, 3], -0.2, 0.2, &mut rng);
    let bias = Tensor::zeros(&[16]);
    c.bench_function("conv3d 8x8x28x28 -> 16ch", |b| {
        b.iter(|| ops::conv3d(&input, &kernel, &bias).unwrap())
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = Tensor::random(&[16, 56, 56], -1.0, 1.0, &mut rng);
    let kernel = Tensor::random(&[16, 16, 3, 3], -0.2, 0.2, &mut rng);
    let bias = Tensor::zeros(&[16]);
    c.bench_function("conv2d 16x56x56 -> 16ch", |b| {
        b.iter(|| ops::conv2d(&input, &kernel, &bias).unwrap())
    });
}

fn bench_pool3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Tensor::random(&[32, 8, 56, 56], -1.0, 1.0, &mut rng);
    c.bench_function("pool3d 2x2x2 on 32x8x56x56", |b| {
        b.iter(|| ops::pool3d(&input, (2, 2, 2)).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::random(&[1, 112, 112], 0.0, 1.0, &mut rng);
    let b2 = Tensor::random(&[1, 112, 112], 0.0, 1.0, &mut rng);
    c.bench_function("cc 112x112", |b| {
        b.iter(|| metrics::cc(&a, &b2).unwrap())
    });
    c.bench_function("kl 112x112", |b| {
        b.iter(|| metrics::kl(&a, &b2).unwrap())
    });
}

criterion_group!(benches, bench_conv3d, bench_conv2d, bench_pool3d, bench_metrics);
criterion_main!(benches);
