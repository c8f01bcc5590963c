//! Shared fixtures for the criterion benchmarks.

use dparc_core::dwi::fibonacci_directions;
use dparc_core::eigen::reconstruct;
use dparc_core::tensor::simulate_signal;
use dparc_core::{DwiSeries, GradientScheme, Grid, Volume};
use nalgebra::{Matrix4, Rotation3, Unit, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A unit-spacing grid with an identity affine.
pub fn unit_grid(edge: usize) -> Grid {
    Grid::new((edge, edge, edge), Matrix4::identity()).expect("valid grid")
}

pub fn random_map(grid: &Grid, seed: u64) -> Volume<f32> {
    let mut rng = rng(seed);
    let mut v = Volume::<f32>::zeros(grid.clone());
    for x in v.data_mut() {
        *x = rng.gen_range(0.0..1.0);
    }
    v
}

pub fn random_labels(grid: &Grid, classes: i32, seed: u64) -> Volume<i32> {
    let mut rng = rng(seed);
    let mut v = Volume::<i32>::zeros(grid.clone());
    for x in v.data_mut() {
        *x = rng.gen_range(0..classes);
    }
    v
}

/// A noiseless diffusion series over random anisotropic tensors:
/// one baseline plus twelve directions at b = 1000.
pub fn synthetic_series(edge: usize, seed: u64) -> DwiSeries {
    let mut rng = rng(seed);
    let grid = unit_grid(edge);
    let tensors: Vec<[f64; 6]> = (0..grid.len())
        .map(|_| {
            let mut l: [f64; 3] = [
                rng.gen_range(1e-4..3e-3),
                rng.gen_range(1e-4..3e-3),
                rng.gen_range(1e-4..3e-3),
            ];
            l.sort_by(|a, b| b.total_cmp(a));
            let axis = Unit::new_normalize(Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let rot = Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::TAU));
            reconstruct(&l, rot.matrix())
        })
        .collect();

    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0, 0.0, 0.0]];
    for g in fibonacci_directions(12) {
        bvals.push(1000.0);
        bvecs.push(g);
    }
    let frames: Vec<Volume<f32>> = bvals
        .iter()
        .zip(&bvecs)
        .map(|(&b, &g)| {
            let mut frame = Volume::<f32>::zeros(grid.clone());
            for (v, t) in frame.data_mut().iter_mut().zip(&tensors) {
                *v = simulate_signal(1000.0, t, b, g) as f32;
            }
            frame
        })
        .collect();
    let scheme = GradientScheme::new(bvals, bvecs).expect("valid scheme");
    DwiSeries::new(frames, scheme).expect("valid series")
}
