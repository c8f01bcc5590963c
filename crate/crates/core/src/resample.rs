//! Pull-based volume resampling and the conformed-space transform.
//!
//! Every output voxel is mapped through the target grid's affine, an
//! optional world-to-world transform, and the source grid's inverse
//! affine, then sampled with nearest-neighbour or trilinear
//! interpolation. Sample points outside the source grid read as zero.
//!
//! Fractional voxel coordinates within 1e-5 of an integer are snapped to
//! it before interpolation, so resampling a grid onto itself (or a chain
//! of exact inverses) reproduces payload values bit for bit instead of
//! smearing them through float round-off.

use nalgebra::{Matrix4, Point3, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::transform::GridTransform;
use crate::volume::{Grid, Volume, Voxel};

/// Interpolation used when sampling between voxel centres.
///
/// Nearest-neighbour rounds half away from zero and never invents values
/// that are absent from the source; label volumes must use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    Nearest,
    #[default]
    Trilinear,
}

const SNAP_EPS: f64 = 1e-5;

#[inline]
fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < SNAP_EPS {
        r
    } else {
        c
    }
}

/// Samples a volume at a fractional voxel coordinate.
pub fn sample_voxel<T: Voxel>(v: &Volume<T>, x: f64, y: f64, z: f64, interp: Interpolation) -> T {
    let (x, y, z) = (snap(x), snap(y), snap(z));
    match interp {
        Interpolation::Nearest => v
            .get_checked(x.round() as i64, y.round() as i64, z.round() as i64)
            .unwrap_or_default(),
        Interpolation::Trilinear => {
            let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
            let (fx, fy, fz) = (x - x0, y - y0, z - z0);
            let (xi, yi, zi) = (x0 as i64, y0 as i64, z0 as i64);
            let mut acc = 0.0f64;
            for dz in 0..2i64 {
                let wz = if dz == 0 { 1.0 - fz } else { fz };
                if wz == 0.0 {
                    continue;
                }
                for dy in 0..2i64 {
                    let wy = if dy == 0 { 1.0 - fy } else { fy };
                    if wy == 0.0 {
                        continue;
                    }
                    for dx in 0..2i64 {
                        let wx = if dx == 0 { 1.0 - fx } else { fx };
                        if wx == 0.0 {
                            continue;
                        }
                        if let Some(val) = v.get_checked(xi + dx, yi + dy, zi + dz) {
                            acc += wx * wy * wz * val.to_f64();
                        }
                    }
                }
            }
            T::from_f64(acc)
        }
    }
}

/// Samples a volume at a world-space point.
pub fn sample_world(v: &Volume<f32>, p: Point3<f64>, interp: Interpolation) -> f64 {
    let inv = match v.grid().world_to_voxel_matrix() {
        Ok(m) => m,
        Err(_) => return 0.0,
    };
    let q = inv.transform_point(&p);
    sample_voxel(v, q.x, q.y, q.z, interp).to_f64()
}

/// Resamples `src` onto `target`. `transform` maps target world
/// coordinates into the source world frame; pass
/// [`GridTransform::Identity`] when both grids share a frame.
pub fn resample_to<T: Voxel>(
    src: &Volume<T>,
    target: &Grid,
    transform: &GridTransform,
    interp: Interpolation,
) -> Result<Volume<T>> {
    let src_inv = src.grid().world_to_voxel_matrix()?;

    // Affine chains collapse into one voxel-to-voxel matrix; dense warps
    // need the full point-by-point route.
    let direct: Option<Matrix4<f64>> = match transform {
        GridTransform::Identity => Some(src_inv * target.affine()),
        GridTransform::Affine { forward, .. } => Some(src_inv * forward * target.affine()),
        GridTransform::Displacement(_) => None,
    };

    let (nx, ny, _) = target.dims();
    let mut data = vec![T::default(); target.len()];
    data.par_chunks_mut(nx).enumerate().for_each(|(line, row)| {
        let y = line % ny;
        let z = line / ny;
        for (x, out) in row.iter_mut().enumerate() {
            let q = match &direct {
                Some(m) => m.transform_point(&Point3::new(x as f64, y as f64, z as f64)),
                None => {
                    let w = target.voxel_to_world(Vector3::new(x as f64, y as f64, z as f64));
                    src_inv.transform_point(&transform.apply(w))
                }
            };
            *out = sample_voxel(src, q.x, q.y, q.z, interp);
        }
    });
    Volume::new(target.clone(), data)
}

/// Resamples a volume into the conformed space: 256 cubed, 1 mm isotropic,
/// LIA orientation, with the field of view centred on the input's world
/// centre. Conforming an already-conformed volume is the identity.
pub fn conform<T: Voxel>(src: &Volume<T>, interp: Interpolation) -> Volume<T> {
    let target = Grid::conformed_around(src.grid().world_center());
    resample_to(src, &target, &GridTransform::Identity, interp)
        .expect("volume affines are invertible by construction")
}
