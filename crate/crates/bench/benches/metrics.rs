use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sapkit_bench::synthetic_pairs;
use sapkit_core::detmetrics::{evaluate_pairs, iou, match_greedy, BBox, EvalPair};

fn bench_iou(c: &mut Criterion) {
    let a = BBox::gt(10.0, 12.0, 50.0, 44.0, 0);
    let b = BBox::pred(14.0, 9.0, 52.0, 47.0, 0, 0.8);
    c.bench_function("iou", |bench| bench.iter(|| iou(black_box(&a), black_box(&b))));
}

fn bench_matching(c: &mut Criterion) {
    let pairs = synthetic_pairs(1, 32);
    let (preds, gts) = &pairs[0];
    c.bench_function("match_greedy_32", |bench| {
        bench.iter(|| match_greedy(black_box(&preds.boxes), black_box(&gts.boxes), 0.5))
    });
}

fn bench_coco(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate_pairs");
    for frames in [10, 100] {
        let data = synthetic_pairs(frames, 16);
        let pairs: Vec<EvalPair<'_>> = data.iter().map(|(p, g)| EvalPair { preds: p, gts: g }).collect();
        group.bench_with_input(BenchmarkId::from_parameter(frames), &pairs, |bench, pairs| {
            bench.iter(|| evaluate_pairs(black_box(pairs)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_iou, bench_matching, bench_coco);
criterion_main!(benches);
