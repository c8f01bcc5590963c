//! Benchmarks for the per-voxel numeric kernels.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dparc_bench::{random_labels, synthetic_series, unit_grid};
use dparc_core::eigen::eigendecompose;
use dparc_core::maps::derive_maps;
use dparc_core::metrics::{hd95, Hd95Mode};
use dparc_core::postprocess::{largest_component, Connectivity};
use dparc_core::tensor::fit_tensors;
use dparc_core::{MapCode, Volume};

fn bench_tensor_fit(c: &mut Criterion) {
    let series = synthetic_series(32, 1);
    c.bench_function("fit_tensors 32^3 x 13", |b| {
        b.iter(|| fit_tensors(black_box(&series)).unwrap())
    });
}

fn bench_eigen_and_maps(c: &mut Criterion) {
    let series = synthetic_series(32, 2);
    let field = fit_tensors(&series).unwrap();
    c.bench_function("eigendecompose 32^3", |b| {
        b.iter(|| eigendecompose(black_box(&field), false))
    });

    let eigen = eigendecompose(&field, false);
    let codes = [MapCode::Fa, MapCode::Tr, MapCode::Cs, MapCode::E1];
    c.bench_function("derive_maps 32^3 x 4", |b| {
        b.iter(|| derive_maps(black_box(&eigen), black_box(&codes)).unwrap())
    });
}

fn bench_hd95(c: &mut Criterion) {
    let grid = unit_grid(64);
    let mut pred = Volume::<i32>::zeros(grid.clone());
    let mut gt = Volume::<i32>::zeros(grid);
    let center = 32.0f64;
    for z in 0..64 {
        for y in 0..64 {
            for x in 0..64 {
                let d2 = |cx: f64| {
                    (x as f64 - cx).powi(2)
                        + (y as f64 - center).powi(2)
                        + (z as f64 - center).powi(2)
                };
                if d2(center) < 20.0 * 20.0 {
                    pred.set(x, y, z, 1);
                }
                if d2(center + 3.0) < 20.0 * 20.0 {
                    gt.set(x, y, z, 1);
                }
            }
        }
    }
    c.bench_function("hd95 64^3 shifted spheres", |b| {
        b.iter(|| hd95(black_box(&pred), black_box(&gt), 1, Hd95Mode::Pooled).unwrap())
    });
}

fn bench_largest_component(c: &mut Criterion) {
    let grid = unit_grid(64);
    let labels = random_labels(&grid, 4, 3);
    c.bench_function("largest_component 64^3", |b| {
        b.iter(|| largest_component(black_box(&labels), Connectivity::TwentySix))
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = bench_tensor_fit, bench_eigen_and_maps, bench_hd95, bench_largest_component
}
criterion_main!(kernels);
