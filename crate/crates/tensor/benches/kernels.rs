//! Sequential vs data-parallel kernel comparison at the shapes the training
//! loop actually hits (test profile: 32px images, 24 input channels).
//!
//! Run with `cargo bench -p helio-tensor`. Building with
//! `--no-default-features` benches only the sequential path, since the
//! parallel dispatchers then compile down to it.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use helio_tensor::kernels;
use helio_tensor::DetRng;

fn fill(rng: &mut DetRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.range(-1.0, 1.0) as f32).collect()
}

fn bench_conv2d(c: &mut Criterion) {
    let dims = (16usize, 24usize, 32usize, 32usize, 8usize); // (n, c, h, w, f)
    let (n, ch, h, w, f) = dims;
    let mut rng = DetRng::seed(1);
    let x = fill(&mut rng, n * ch * h * w);
    let wt = fill(&mut rng, f * ch * 9);
    let b = fill(&mut rng, f);
    let dy = fill(&mut rng, n * f * h * w);
    let mut out = vec![0.0f32; n * f * h * w];
    let mut dx = vec![0.0f32; n * ch * h * w];
    let mut dw = vec![0.0f32; f * ch * 9];
    let mut db = vec![0.0f32; f];

    let mut g = c.benchmark_group("conv2d_16x24x32x32_f8");
    g.bench_function("fwd_seq", |bench| {
        bench.iter(|| kernels::conv2d_fwd_seq(black_box(&x), &wt, &b, dims, &mut out))
    });
    g.bench_function("fwd", |bench| {
        bench.iter(|| kernels::conv2d_fwd(black_box(&x), &wt, &b, dims, &mut out))
    });
    g.bench_function("bwd_input_seq", |bench| {
        bench.iter(|| kernels::conv2d_bwd_input_seq(black_box(&dy), &wt, dims, &mut dx))
    });
    g.bench_function("bwd_input", |bench| {
        bench.iter(|| kernels::conv2d_bwd_input(black_box(&dy), &wt, dims, &mut dx))
    });
    g.bench_function("bwd_filter_seq", |bench| {
        bench.iter(|| kernels::conv2d_bwd_filter_seq(black_box(&x), &dy, dims, &mut dw, &mut db))
    });
    g.bench_function("bwd_filter", |bench| {
        bench.iter(|| kernels::conv2d_bwd_filter(black_box(&x), &dy, dims, &mut dw, &mut db))
    });
    g.finish();
}

fn bench_dense(c: &mut Criterion) {
    let dims = (64usize, 1032usize, 64usize); // (n, d, k): fc1 of the test profile
    let (n, d, k) = dims;
    let mut rng = DetRng::seed(2);
    let x = fill(&mut rng, n * d);
    let w = fill(&mut rng, d * k);
    let b = fill(&mut rng, k);
    let dy = fill(&mut rng, n * k);
    let mut out = vec![0.0f32; n * k];
    let mut dx = vec![0.0f32; n * d];
    let mut dw = vec![0.0f32; d * k];
    let mut db = vec![0.0f32; k];

    let mut g = c.benchmark_group("dense_64x1032x64");
    g.bench_function("fwd_seq", |bench| {
        bench.iter(|| kernels::dense_fwd_seq(black_box(&x), &w, &b, dims, &mut out))
    });
    g.bench_function("fwd", |bench| {
        bench.iter(|| kernels::dense_fwd(black_box(&x), &w, &b, dims, &mut out))
    });
    g.bench_function("bwd_weight_seq", |bench| {
        bench.iter(|| kernels::dense_bwd_weight_seq(black_box(&x), &dy, dims, &mut dw, &mut db))
    });
    g.bench_function("bwd_weight", |bench| {
        bench.iter(|| kernels::dense_bwd_weight(black_box(&x), &dy, dims, &mut dw, &mut db))
    });
    g.finish();
}

fn bench_batchnorm(c: &mut Criterion) {
    let (n, f, hw) = (64usize, 8usize, 1024usize);
    let mut rng = DetRng::seed(3);
    let x = fill(&mut rng, n * f * hw);
    let gamma = vec![1.0f32; f];
    let beta = vec![0.0f32; f];
    let mut mean = vec![0.0f32; f];
    let mut var = vec![0.0f32; f];
    let mut out = vec![0.0f32; n * f * hw];

    let mut g = c.benchmark_group("batchnorm_64x8x1024");
    g.bench_function("stats_apply", |bench| {
        bench.iter(|| {
            kernels::bn_stats(black_box(&x), n, f, hw, &mut mean, &mut var);
            let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + 1e-5).sqrt()).collect();
            kernels::bn_apply(&x, &mean, &inv, &gamma, &beta, f, hw, &mut out);
        })
    });
    g.finish();
}

criterion_group!(benches, bench_conv2d, bench_dense, bench_batchnorm);
criterion_main!(benches);
