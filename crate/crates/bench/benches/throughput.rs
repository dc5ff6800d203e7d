use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use redimnet_bench::{noise_wave, score_set, uniform};
use redimnet_core::metrics::{eer, min_dcf, DcfParams};
use redimnet_core::tensor::ConvSpec;
use redimnet_core::{Config, FeatureConfig, FeatureExtractor, Mode, Model};

fn tiny_config() -> Config {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    Config::load(&path).expect("tiny config parses")
}

fn features(c: &mut Criterion) {
    let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let wave = noise_wave(2.0, 0);
    c.bench_function("features 2s", |b| b.iter(|| fx.features(black_box(&wave)).unwrap()));
}

fn conv(c: &mut Criterion) {
    let x = uniform(&[1, 32, 72, 132], 0);
    let dense = uniform(&[32, 32, 3, 3], 1);
    let depthwise = uniform(&[32, 1, 3, 3], 2);
    let mut g = c.benchmark_group("conv2d 32x72x132");
    g.bench_function("dense 3x3", |b| b.iter(|| x.conv2d(&dense, None, ConvSpec::new((1, 1), (1, 1), 1)).unwrap()));
    g.bench_function("depthwise 3x3", |b| {
        b.iter(|| x.conv2d(&depthwise, None, ConvSpec::new((1, 1), (1, 1), 32)).unwrap())
    });
    g.finish();
}

fn model(c: &mut Criterion) {
    let cfg = tiny_config();
    let m = Model::<f32>::build(&cfg.model, 0).unwrap();
    let x = uniform(&[cfg.model.f, 132], 3);
    c.bench_function("tiny embed 2s", |b| b.iter(|| m.embed(black_box(&x)).unwrap()));
    let batch = uniform(&[4, cfg.model.f, 132], 4);
    c.bench_function("tiny forward+backward batch 4", |b| {
        b.iter(|| {
            let y = m.forward(&batch, Mode::Train).unwrap();
            y.square().sum().backward().unwrap();
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("metrics");
    for n in [1_000, 100_000] {
        let set = score_set(n, 0);
        g.bench_with_input(BenchmarkId::new("eer", n), &set, |b, s| b.iter(|| eer(s).unwrap()));
        g.bench_with_input(BenchmarkId::new("min_dcf", n), &set, |b, s| {
            b.iter(|| min_dcf(s, DcfParams::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = features, conv, model, metrics
}
criterion_main!(benches);
