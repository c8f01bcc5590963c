//! In-memory 3-D volumes anchored to world space.
//!
//! A [`Grid`] couples integer dimensions with a voxel-to-world affine;
//! a [`Volume`] adds a flat data payload in x-fastest order, i.e. the
//! element at voxel `(x, y, z)` lives at index `x + nx * (y + ny * z)`.
//! Payloads come in the three scalar types the on-disk format supports
//! (`f32`, `i32`, `u8`); [`AnyVolume`] carries "one of the three" across
//! I/O boundaries.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Edge length of the conformed grid, in voxels.
pub const CONFORMED_DIM: usize = 256;

/// Isotropic voxel spacing of the conformed grid, in millimetres.
pub const CONFORMED_SPACING: f64 = 1.0;

/// Scalar payload types a volume can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarType {
    F32,
    I32,
    U8,
}

impl ScalarType {
    /// NIfTI-1 `datatype` header code.
    pub fn nifti_code(self) -> i16 {
        match self {
            ScalarType::F32 => 16,
            ScalarType::I32 => 8,
            ScalarType::U8 => 2,
        }
    }

    /// Bytes per voxel on disk and in memory.
    pub fn byte_width(self) -> usize {
        match self {
            ScalarType::F32 | ScalarType::I32 => 4,
            ScalarType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarType::F32 => "float32",
            ScalarType::I32 => "int32",
            ScalarType::U8 => "uint8",
        }
    }
}

/// Scalar types that can live in a [`Volume`] payload.
pub trait Voxel: Copy + PartialEq + Default + Send + Sync + 'static {
    const SCALAR: ScalarType;

    fn to_f64(self) -> f64;

    /// Inverse of [`Voxel::to_f64`], rounding and saturating for the
    /// integer types. Used when interpolation produces fractional values.
    fn from_f64(v: f64) -> Self;
}

impl Voxel for f32 {
    const SCALAR: ScalarType = ScalarType::F32;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Voxel for i32 {
    const SCALAR: ScalarType = ScalarType::I32;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
    }
}

impl Voxel for u8 {
    const SCALAR: ScalarType = ScalarType::U8;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// A world-anchored sampling grid: dimensions plus a voxel-to-world affine.
///
/// The affine's upper-left 3x3 block holds the world displacement per unit
/// voxel step along each axis; its fourth column is the world position of
/// voxel `(0, 0, 0)`. Spacing is the per-axis column norm and is kept
/// consistent with the affine by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: (usize, usize, usize),
    spacing: [f64; 3],
    affine: Matrix4<f64>,
}

impl Grid {
    /// Builds a grid, deriving spacing from the affine's column norms.
    pub fn new(dims: (usize, usize, usize), affine: Matrix4<f64>) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(CoreError::InvalidVolume(format!(
                "grid dimensions must be positive, got {dims:?}"
            )));
        }
        let m = affine.fixed_view::<3, 3>(0, 0);
        let det = m.determinant();
        if det.abs() <= 1e-12 || !det.is_finite() {
            return Err(CoreError::InvalidVolume(format!(
                "affine is singular or non-finite (det = {det})"
            )));
        }
        let spacing = [
            m.column(0).norm(),
            m.column(1).norm(),
            m.column(2).norm(),
        ];
        Ok(Grid {
            dims,
            spacing,
            affine,
        })
    }

    /// Builds a grid from an explicitly stated spacing, rejecting spacings
    /// that disagree with the affine's column norms by more than 1e-6
    /// relative.
    pub fn with_spacing(
        dims: (usize, usize, usize),
        spacing: [f64; 3],
        affine: Matrix4<f64>,
    ) -> Result<Self> {
        let grid = Grid::new(dims, affine)?;
        for axis in 0..3 {
            let stated = spacing[axis];
            let derived = grid.spacing[axis];
            if stated <= 0.0 {
                return Err(CoreError::InvalidVolume(format!(
                    "spacing[{axis}] must be positive, got {stated}"
                )));
            }
            if (stated - derived).abs() > 1e-6 * derived.max(1e-30) {
                return Err(CoreError::InvalidVolume(format!(
                    "spacing[{axis}] = {stated} disagrees with affine column norm {derived}"
                )));
            }
        }
        Ok(grid)
    }

    /// The conformed target grid: 256 cubed, 1 mm isotropic, LIA axes,
    /// with its world-space field of view centred on `center`.
    pub fn conformed_around(center: Point3<f64>) -> Grid {
        let axes = lia_axes() * CONFORMED_SPACING;
        let half = (CONFORMED_DIM as f64 - 1.0) / 2.0;
        let origin = center.coords - axes * Vector3::new(half, half, half);
        let mut affine = Matrix4::identity();
        affine.fixed_view_mut::<3, 3>(0, 0).copy_from(&axes);
        affine.fixed_view_mut::<3, 1>(0, 3).copy_from(&origin);
        Grid::new((CONFORMED_DIM, CONFORMED_DIM, CONFORMED_DIM), affine)
            .expect("conformed affine is orthonormal by construction")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    /// Number of voxels in the grid.
    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of voxel `(x, y, z)` in x-fastest order.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    /// Voxel coordinate of flat index `i`, inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.dims.0;
        let y = (i / self.dims.0) % self.dims.1;
        let z = i / (self.dims.0 * self.dims.1);
        (x, y, z)
    }

    /// World position of a (possibly fractional) voxel coordinate.
    pub fn voxel_to_world(&self, v: Vector3<f64>) -> Point3<f64> {
        let m = self.affine.fixed_view::<3, 3>(0, 0);
        let t = self.affine.fixed_view::<3, 1>(0, 3);
        Point3::from(m * v + t)
    }

    /// World position of the grid's centre (the midpoint of the voxel-centre
    /// bounding box).
    pub fn world_center(&self) -> Point3<f64> {
        let half = Vector3::new(
            (self.dims.0 as f64 - 1.0) / 2.0,
            (self.dims.1 as f64 - 1.0) / 2.0,
            (self.dims.2 as f64 - 1.0) / 2.0,
        );
        self.voxel_to_world(half)
    }

    /// Inverse of the voxel-to-world affine.
    pub fn world_to_voxel_matrix(&self) -> Result<Matrix4<f64>> {
        self.affine.try_inverse().ok_or_else(|| {
            CoreError::InvalidVolume("affine is not invertible".to_string())
        })
    }

    /// Three-letter anatomical orientation code, one letter per voxel axis,
    /// naming the world direction the axis heads towards (dominant world
    /// axis per affine column). The conformed grid reports `LIA`.
    pub fn orientation(&self) -> String {
        let m = self.affine.fixed_view::<3, 3>(0, 0);
        let mut code = String::with_capacity(3);
        for col in 0..3 {
            let c = m.column(col);
            let mut best = 0;
            for row in 1..3 {
                if c[row].abs() > c[best].abs() {
                    best = row;
                }
            }
            let letter = match (best, c[best] >= 0.0) {
                (0, true) => 'R',
                (0, false) => 'L',
                (1, true) => 'A',
                (1, false) => 'P',
                (2, true) => 'S',
                (2, false) => 'I',
                _ => unreachable!(),
            };
            code.push(letter);
        }
        code
    }

    /// Whether two grids describe the same sampling lattice. Dimensions must
    /// match exactly; affine entries are compared with an absolute tolerance
    /// that absorbs the float32 precision of on-disk headers.
    pub fn compatible(&self, other: &Grid) -> bool {
        if self.dims != other.dims {
            return false;
        }
        self.affine
            .iter()
            .zip(other.affine.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-3)
    }
}

/// Rotation part of the conformed grid's affine: voxel axes head Left,
/// Inferior, Anterior in a right-anterior-superior world frame.
pub fn lia_axes() -> Matrix3<f64> {
    Matrix3::from_columns(&[
        Vector3::new(-1.0, 0.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(0.0, 1.0, 0.0),
    ])
}

/// A scalar field sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    data: Vec<T>,
}

impl<T: Voxel> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(CoreError::InvalidVolume(format!(
                "payload length {} does not match grid {:?} ({} voxels)",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Self {
        let data = vec![value; grid.len()];
        Volume { grid, data }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, T::default())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.grid.index(x, y, z);
        self.data[i] = value;
    }

    /// Value at integer voxel coordinates, `None` outside the grid.
    /// Signed arguments let callers probe neighbourhoods without underflow
    /// checks.
    #[inline]
    pub fn get_checked(&self, x: i64, y: i64, z: i64) -> Option<T> {
        let (nx, ny, nz) = self.grid.dims();
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            None
        } else {
            Some(self.data[self.grid.index(x as usize, y as usize, z as usize)])
        }
    }

    /// Re-types the payload voxel by voxel via `f64`, keeping the grid.
    pub fn cast<U: Voxel>(&self) -> Volume<U> {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// A volume of any supported scalar type, as returned by the file reader.
#[derive(Debug, Clone)]
pub enum AnyVolume {
    F32(Volume<f32>),
    I32(Volume<i32>),
    U8(Volume<u8>),
}

impl AnyVolume {
    pub fn scalar_type(&self) -> ScalarType {
        match self {
            AnyVolume::F32(_) => ScalarType::F32,
            AnyVolume::I32(_) => ScalarType::I32,
            AnyVolume::U8(_) => ScalarType::U8,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            AnyVolume::F32(v) => v.grid(),
            AnyVolume::I32(v) => v.grid(),
            AnyVolume::U8(v) => v.grid(),
        }
    }

    /// Converts to `f32`, copying only when the payload is another type.
    pub fn into_f32(self) -> Volume<f32> {
        match self {
            AnyVolume::F32(v) => v,
            AnyVolume::I32(v) => v.cast(),
            AnyVolume::U8(v) => v.cast(),
        }
    }

    /// Converts to `i32` for label payloads. Float payloads are rejected:
    /// labels travel as integers and silently rounding a float map would
    /// hide an upstream mistake.
    pub fn into_labels(self) -> Result<Volume<i32>> {
        match self {
            AnyVolume::F32(_) => Err(CoreError::LabelData(
                "expected an integer label volume, found float32".to_string(),
            )),
            AnyVolume::I32(v) => Ok(v),
            AnyVolume::U8(v) => Ok(v.cast()),
        }
    }
}

impl From<Volume<f32>> for AnyVolume {
    fn from(v: Volume<f32>) -> Self {
        AnyVolume::F32(v)
    }
}

impl From<Volume<i32>> for AnyVolume {
    fn from(v: Volume<i32>) -> Self {
        AnyVolume::I32(v)
    }
}

impl From<Volume<u8>> for AnyVolume {
    fn from(v: Volume<u8>) -> Self {
        AnyVolume::U8(v)
    }
}
