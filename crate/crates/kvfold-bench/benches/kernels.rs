//! Microbenchmarks for the row-level kernels: the three merge functions,
//! pair restoration, angular distance, and the round-to-nearest quantizer.
//!
//! Merge kernels are swept across token widths so the cost of the
//! double-precision accumulation is visible as the row grows.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use kvfold::{
    angular_distance, dequantize, max_norm_merge, mean_merge, quantize, restore_pair, slerp_merge,
    MergeParams, QuantConfig,
};
use kvfold_bench::{bench_dump, vector_pair};

const WIDTHS: [usize; 3] = [64, 1024, 4096];

fn merge_kernels(c: &mut Criterion) {
    let params = MergeParams::default();
    let mut group = c.benchmark_group("merge");
    for &hidden in &WIDTHS {
        let (cur, prev) = vector_pair(hidden, 0xBE7C_0001 + hidden as u64);
        group.throughput(Throughput::Elements(hidden as u64));
        group.bench_with_input(BenchmarkId::new("slerp", hidden), &hidden, |b, _| {
            b.iter(|| slerp_merge(black_box(&cur), black_box(&prev), &params).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("mean", hidden), &hidden, |b, _| {
            b.iter(|| mean_merge(black_box(&cur), black_box(&prev)));
        });
        group.bench_with_input(BenchmarkId::new("max_norm", hidden), &hidden, |b, _| {
            b.iter(|| max_norm_merge(black_box(&cur), black_box(&prev), &params).unwrap());
        });
    }
    group.finish();
}

fn pair_restoration(c: &mut Criterion) {
    let params = MergeParams::default();
    let mut group = c.benchmark_group("restore_pair");
    for &hidden in &WIDTHS {
        let (cur, prev) = vector_pair(hidden, 0xBE7C_0002 + hidden as u64);
        let merged = slerp_merge(&cur, &prev, &params).unwrap();
        group.throughput(Throughput::Elements(hidden as u64));
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |b, _| {
            b.iter(|| restore_pair(black_box(&merged)));
        });
    }
    group.finish();
}

fn angular_distance_kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("angular_distance");
    for &hidden in &WIDTHS {
        let (cur, prev) = vector_pair(hidden, 0xBE7C_0003 + hidden as u64);
        group.throughput(Throughput::Elements(hidden as u64));
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |b, _| {
            b.iter(|| angular_distance(black_box(&cur), black_box(&prev)).unwrap());
        });
    }
    group.finish();
}

fn quantizer(c: &mut Criterion) {
    const TOKENS: usize = 128;
    const HIDDEN: usize = 4096;
    let dump = bench_dump(1, TOKENS, HIDDEN, 0xBE7C_0004);
    let matrix = &dump.layers()[0].key;
    let mut group = c.benchmark_group("quantizer");
    group.throughput(Throughput::Elements((TOKENS * HIDDEN) as u64));
    for bits in [4u8, 8] {
        let config = QuantConfig { bits, group_size: 32 };
        let coded = quantize(matrix, &config).unwrap();
        group.bench_with_input(BenchmarkId::new("quantize", bits), &bits, |b, _| {
            b.iter(|| quantize(black_box(matrix), &config).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("dequantize", bits), &bits, |b, _| {
            b.iter(|| dequantize(black_box(&coded)));
        });
    }
    group.finish();
}

criterion_group!(kernels, merge_kernels, pair_restoration, angular_distance_kernel, quantizer);
criterion_main!(kernels);
