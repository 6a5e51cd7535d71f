use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use flashbias::numerics::{add_b16_pair, dot_lp, encode_b16, prefix_error_trace, B16};

fn encode(c: &mut Criterion) {
    let xs: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.7311).sin() * 1e3).collect();
    let mut g = c.benchmark_group("encode_b16");
    g.throughput(Throughput::Elements(xs.len() as u64));
    g.bench_function("4096 values", |b| {
        b.iter(|| {
            xs.iter()
                .map(|&x| encode_b16(black_box(x)).to_bits() as u64)
                .sum::<u64>()
        })
    });
    g.finish();
}

fn adder(c: &mut Criterion) {
    let pairs: Vec<(B16, B16)> = (0..1024u16)
        .map(|i| {
            (
                B16::from_bits(0x3F80 + (i % 128)),
                B16::from_bits(0xBF00 + (i * 7) % 256),
            )
        })
        .collect();
    c.bench_function("add_b16_pair x1024", |b| {
        b.iter(|| {
            pairs
                .iter()
                .map(|&(x, y)| add_b16_pair(black_box(x), black_box(y)).0.to_bits() as u32)
                .sum::<u32>()
        })
    });
}

fn dots(c: &mut Criterion) {
    let p: Vec<B16> = (0..128)
        .map(|i| B16::from_f64(1.0 / (1.0 + i as f64)))
        .collect();
    let v: Vec<B16> = (0..128)
        .map(|i| B16::from_f64(-2.0 + (i as f64) / 64.0))
        .collect();
    let mut g = c.benchmark_group("dot");
    g.bench_function("dot_lp n=128", |b| {
        b.iter(|| dot_lp(black_box(&p), black_box(&v)).unwrap())
    });
    g.bench_function("prefix_error_trace n=128", |b| {
        b.iter(|| prefix_error_trace(black_box(&p), black_box(&v)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, encode, adder, dots);
criterion_main!(benches);
