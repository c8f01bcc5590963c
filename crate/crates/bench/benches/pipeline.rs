//! Benchmarks for the volume-level pipeline stages.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dparc_bench::{random_map, unit_grid};
use dparc_core::backend::ConstantBackend;
use dparc_core::postprocess::{clean_group_labels, PostprocessConfig};
use dparc_core::sliding::{infer_volume, SlidingWindowConfig};
use dparc_core::{conform, Interpolation, Volume};

fn bench_sliding_window(c: &mut Criterion) {
    let grid = unit_grid(64);
    let channels: Vec<_> = (0..4).map(|i| random_map(&grid, 10 + i)).collect();
    let refs: Vec<&Volume<f32>> = channels.iter().collect();
    let config = SlidingWindowConfig {
        patch: [32, 32, 32],
        overlap: 0.5,
        sigma_fraction: 0.125,
    };
    c.bench_function("sliding window 64^3, patch 32, 8 classes", |b| {
        b.iter(|| {
            let mut backend = ConstantBackend::new(4, vec![0.1, 0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]);
            infer_volume(black_box(&refs), &mut backend, &config).unwrap()
        })
    });
}

fn bench_cleanup(c: &mut Criterion) {
    let grid = unit_grid(64);
    let mut labels = Volume::<i32>::zeros(grid.clone());
    let mut mask = Volume::<u8>::zeros(grid);
    for z in 0..64 {
        for y in 0..64 {
            for x in 8..56 {
                mask.set(x, y, z, 1);
                if (x + y) % 17 != 0 {
                    labels.set(x, y, z, 1 + (x as i32) / 24);
                }
            }
        }
    }
    let config = PostprocessConfig::default();
    c.bench_function("cleanup chain 64^3", |b| {
        b.iter(|| clean_group_labels(black_box(&labels), black_box(&mask), &config).unwrap())
    });
}

fn bench_conform(c: &mut Criterion) {
    let grid = unit_grid(96);
    let volume = random_map(&grid, 42);
    c.bench_function("conform 96^3 to 256^3 trilinear", |b| {
        b.iter(|| conform(black_box(&volume), Interpolation::Trilinear))
    });
}

criterion_group! {
    name = pipeline;
    config = Criterion::default().sample_size(10);
    targets = bench_sliding_window, bench_cleanup, bench_conform
}
criterion_main!(pipeline);
