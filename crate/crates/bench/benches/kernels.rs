use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use eatformer::tensor::{Conv2dParams, Tape};
use eatformer::Tensor;

fn input(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| ((i * 31) % 17) as f32 / 17.0 - 0.5).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = input(&[8, 32, 16, 16]);
    let dense = input(&[64, 32, 3, 3]);
    let depthwise = input(&[32, 1, 3, 3]);
    let mut g = c.benchmark_group("conv2d");
    g.bench_function("dense_3x3_fwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let w = tape.constant(&dense);
            black_box(tape.conv2d(xv, w, None, Conv2dParams::new(1, 1, 1, 1)).unwrap());
        })
    });
    g.bench_function("dense_3x3_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(&x);
            let w = tape.param(&dense);
            let y = tape.conv2d(xv, w, None, Conv2dParams::new(1, 1, 1, 1)).unwrap();
            let loss = tape.sum(y);
            black_box(tape.backward(loss).unwrap());
        })
    });
    g.bench_function("depthwise_dilated_fwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let w = tape.constant(&depthwise);
            black_box(tape.conv2d(xv, w, None, Conv2dParams::new(1, 2, 2, 32)).unwrap());
        })
    });
    g.finish();
}

fn attention_primitives(c: &mut Criterion) {
    let q = input(&[8, 4, 64, 16]);
    let mut g = c.benchmark_group("attention");
    g.bench_function("scores_softmax_64_tokens", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let qv = tape.constant(&q);
            let s = tape.matmul(qv, qv, true).unwrap();
            black_box(tape.softmax(s, 3).unwrap());
        })
    });
    let map = input(&[8, 16, 8, 8]);
    let coords = Tensor::from_fn([8, 64, 2], |i| ((i * 7) % 29) as f32 / 4.0).unwrap();
    g.bench_function("bilinear_sample_64_points", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let m = tape.constant(&map);
            let c = tape.constant(&coords);
            black_box(tape.bilinear_sample(m, c).unwrap());
        })
    });
    g.finish();
}

criterion_group!(benches, conv, attention_primitives);
criterion_main!(benches);
