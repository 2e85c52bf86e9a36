//! Rayon data-parallel kernels against their sequential reference paths.
//!
//! Run with `cargo bench -p cross360`. The `_seq` entry points execute the
//! same per-element arithmetic without rayon, so these groups measure pure
//! parallelization gain; a build with `--no-default-features` routes the
//! default entry points through the sequential path as well.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cross360::layout::{build_layout, LayoutConfig};
use cross360::model::{Model, ModelConfig};
use cross360::nn::kernels;
use cross360::nn::Tape;
use cross360::resample;
use cross360::scene::room_scene;
use cross360::Grid;

fn feature_grid(channels: usize, h: usize, w: usize) -> Grid {
    let data = (0..channels * h * w)
        .map(|i| ((i as f64) * 0.37).sin())
        .collect();
    Grid::from_data(channels, h, w, data, None).unwrap()
}

fn bench_resample(c: &mut Criterion) {
    let grid = feature_grid(16, 64, 128);
    let layout = build_layout(&LayoutConfig::full26(), 24).unwrap();
    let patches = resample::erp_to_tangent(&grid, &layout);

    let mut g = c.benchmark_group("erp_to_tangent/full26_res24_16ch");
    g.bench_function("parallel", |b| {
        b.iter(|| resample::erp_to_tangent(black_box(&grid), black_box(&layout)))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| resample::erp_to_tangent_seq(black_box(&grid), black_box(&layout)))
    });
    g.finish();

    let mut g = c.benchmark_group("tangent_to_erp/full26_res24_16ch");
    g.bench_function("parallel", |b| {
        b.iter(|| resample::tangent_to_erp(black_box(&patches), 64, 128).unwrap())
    });
    g.bench_function("sequential", |b| {
        b.iter(|| resample::tangent_to_erp_seq(black_box(&patches), 64, 128).unwrap())
    });
    g.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let n = 192;
    let a: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.11).cos()).collect();
    let b: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.07).sin()).collect();
    let mut out = vec![0.0; n * n];

    let mut g = c.benchmark_group("matmul/192x192x192");
    g.bench_function("parallel", |bch| {
        bch.iter(|| kernels::matmul(black_box(&a), black_box(&b), n, n, n, &mut out))
    });
    g.bench_function("sequential", |bch| {
        bch.iter(|| kernels::matmul_seq(black_box(&a), black_box(&b), n, n, n, &mut out))
    });
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let (ci, co, h, w) = (16, 16, 64, 128);
    let x: Vec<f64> = (0..ci * h * w).map(|i| (i as f64 * 0.05).sin()).collect();
    let k: Vec<f64> = (0..co * ci * 9).map(|i| (i as f64 * 0.19).cos()).collect();
    let mut out = vec![0.0; co * h * w];
    let pad = (kernels::PadMode::Replicate, kernels::PadMode::Wrap);

    let mut g = c.benchmark_group("conv3x3/16to16_64x128");
    g.bench_function("parallel", |b| {
        b.iter(|| kernels::conv3x3(black_box(&x), black_box(&k), ci, co, h, w, pad, &mut out))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| kernels::conv3x3_seq(black_box(&x), black_box(&k), ci, co, h, w, pad, &mut out))
    });
    g.finish();
}

fn bench_model_forward(c: &mut Criterion) {
    // Toy-scale model; the paper-scale default takes seconds per pass and
    // belongs in the acceptance suite, not a tight bench loop.
    let config = ModelConfig {
        height: 32,
        width: 64,
        ..ModelConfig::toy()
    };
    let model = Model::new(config).unwrap();
    let params = model.init_params();
    let (image, _) = room_scene(32, 64);

    c.bench_function("model_forward/toy_32x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind_params(&mut tape, &params).unwrap();
            black_box(model.forward(&mut tape, &bound, &image).unwrap());
        })
    });
}

criterion_group!(
    benches,
    bench_resample,
    bench_matmul,
    bench_conv,
    bench_model_forward
);
criterion_main!(benches);
