use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sapkit_core::model::{forecast, tat_layer, toy_backbone, ModelConfig, ModelParams, TemporalProposal};
use sapkit_core::numerics::Tensor;

fn ramp(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| (i as f64 * 0.37 + phase).sin())
}

fn bench_tat(c: &mut Criterion) {
    let params = ModelParams::init(&ModelConfig::default(), 0).expect("init");
    let ch = params.config.channels;
    let q = ramp(&[2, 8, 8, ch], 0.1);
    let k = ramp(&[4, 8, 8, ch], 0.7);
    let v = ramp(&[4, 8, 8, ch], 1.3);
    c.bench_function("tat_layer_8x8", |b| {
        b.iter(|| tat_layer(&params, 0, black_box(&q), black_box(&k), black_box(&v), &[1, 3], &[-4, -2, -1, 0]))
    });
}

fn bench_forecast(c: &mut Criterion) {
    let params = ModelParams::init(&ModelConfig::default(), 0).expect("init");
    let image = |p: f64| ramp(&[3, 64, 64], p).map(f64::abs);
    let proposal = TemporalProposal::new(vec![-4, -2, -1], vec![1, 2, 4]).expect("proposal");
    let buffered: Vec<_> = proposal
        .past
        .iter()
        .map(|&p| toy_backbone(&params, &image(p as f64)).expect("backbone").with_source_index(p))
        .collect();
    let current = image(0.0);
    c.bench_function("backbone_64", |b| b.iter(|| toy_backbone(&params, black_box(&current))));
    c.bench_function("forecast_64_3x3", |b| {
        b.iter(|| forecast(&params, black_box(&current), &buffered, &proposal))
    });
}

criterion_group!(benches, bench_tat, bench_forecast);
criterion_main!(benches);
