//! World-to-world coordinate transforms used when resampling between
//! grids.
//!
//! A [`GridTransform`] maps points of a *target* world frame into a
//! *source* world frame, which is the direction a pull-based resampler
//! needs. Affine transforms round-trip through JSON (a row-major 16-float
//! matrix); dense warps load from a displacement-field NIfTI with three
//! components holding millimetre offsets.

use std::path::Path;

use nalgebra::{Matrix4, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nifti;
use crate::resample::{sample_world, Interpolation};
use crate::volume::Volume;

/// A mapping from one world coordinate frame to another.
#[derive(Debug, Clone)]
pub enum GridTransform {
    Identity,
    Affine {
        forward: Matrix4<f64>,
        inverse: Matrix4<f64>,
    },
    Displacement(DisplacementField),
}

impl GridTransform {
    /// Wraps an affine matrix, rejecting singular or non-finite input.
    pub fn affine(matrix: Matrix4<f64>) -> Result<GridTransform> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidTransform(
                "affine contains non-finite entries".to_string(),
            ));
        }
        let inverse = matrix.try_inverse().ok_or_else(|| {
            CoreError::InvalidTransform("affine is not invertible".to_string())
        })?;
        Ok(GridTransform::Affine {
            forward: matrix,
            inverse,
        })
    }

    /// Maps a point from the target frame into the source frame.
    pub fn apply(&self, p: Point3<f64>) -> Point3<f64> {
        match self {
            GridTransform::Identity => p,
            GridTransform::Affine { forward, .. } => forward.transform_point(&p),
            GridTransform::Displacement(field) => field.apply(p),
        }
    }

    /// The transform mapping in the opposite direction.
    ///
    /// Dense displacement fields are not analytically invertible; callers
    /// must supply the matching inverse field produced by their
    /// registration tool.
    pub fn inverted(&self) -> Result<GridTransform> {
        match self {
            GridTransform::Identity => Ok(GridTransform::Identity),
            GridTransform::Affine { forward, inverse } => Ok(GridTransform::Affine {
                forward: *inverse,
                inverse: *forward,
            }),
            GridTransform::Displacement(_) => Err(CoreError::InvalidTransform(
                "a displacement field cannot be inverted; supply the inverse field".to_string(),
            )),
        }
    }

    /// Loads a transform from disk: `.json` files hold an affine (or the
    /// identity), anything else is read as a displacement-field NIfTI.
    pub fn load(path: &Path) -> Result<GridTransform> {
        if path.extension().map(|e| e == "json").unwrap_or(false) {
            let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let spec: TransformJson = serde_json::from_str(&text).map_err(|e| {
                CoreError::InvalidTransform(format!("{}: {e}", path.display()))
            })?;
            spec.into_transform()
        } else {
            let frames = nifti::read_series(path)?;
            DisplacementField::new(frames).map(GridTransform::Displacement)
        }
    }

    /// Saves an affine or identity transform as JSON. Displacement fields
    /// live in their NIfTI file already and are not re-serialized here.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let spec = match self {
            GridTransform::Identity => TransformJson {
                kind: "identity".to_string(),
                matrix: None,
            },
            GridTransform::Affine { forward, .. } => TransformJson {
                kind: "affine".to_string(),
                matrix: Some(row_major(forward)),
            },
            GridTransform::Displacement(_) => {
                return Err(CoreError::InvalidTransform(
                    "displacement fields are stored as NIfTI, not JSON".to_string(),
                ))
            }
        };
        crate::io_util::write_json(path, &spec)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformJson {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<f64>>,
}

impl TransformJson {
    fn into_transform(self) -> Result<GridTransform> {
        match self.kind.as_str() {
            "identity" => Ok(GridTransform::Identity),
            "affine" => {
                let m = self.matrix.ok_or_else(|| {
                    CoreError::InvalidTransform("affine transform lacks a matrix".to_string())
                })?;
                if m.len() != 16 {
                    return Err(CoreError::InvalidTransform(format!(
                        "affine matrix must have 16 entries, found {}",
                        m.len()
                    )));
                }
                let mut matrix = Matrix4::zeros();
                for row in 0..4 {
                    for col in 0..4 {
                        matrix[(row, col)] = m[4 * row + col];
                    }
                }
                GridTransform::affine(matrix)
            }
            other => Err(CoreError::InvalidTransform(format!(
                "unknown transform kind {other:?}"
            ))),
        }
    }
}

fn row_major(m: &Matrix4<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(16);
    for row in 0..4 {
        for col in 0..4 {
            out.push(m[(row, col)]);
        }
    }
    out
}

/// A dense warp: per-voxel millimetre offsets on their own grid.
///
/// Applying the field adds the trilinearly interpolated offset to the
/// query point. Points outside the field's grid pass through unchanged.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    components: Vec<Volume<f32>>,
}

impl DisplacementField {
    pub fn new(components: Vec<Volume<f32>>) -> Result<Self> {
        if components.len() != 3 {
            return Err(CoreError::InvalidTransform(format!(
                "displacement field must have 3 components, found {}",
                components.len()
            )));
        }
        let first = components[0].grid().clone();
        for (i, c) in components.iter().enumerate() {
            if c.grid() != &first {
                return Err(CoreError::InvalidTransform(format!(
                    "displacement component {i} is on a different grid"
                )));
            }
            if c.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::InvalidTransform(format!(
                    "displacement component {i} contains non-finite values"
                )));
            }
        }
        Ok(DisplacementField { components })
    }

    pub fn components(&self) -> &[Volume<f32>] {
        &self.components
    }

    fn apply(&self, p: Point3<f64>) -> Point3<f64> {
        let dx = sample_world(&self.components[0], p, Interpolation::Trilinear);
        let dy = sample_world(&self.components[1], p, Interpolation::Trilinear);
        let dz = sample_world(&self.components[2], p, Interpolation::Trilinear);
        Point3::new(p.x + dx, p.y + dy, p.z + dz)
    }
}
