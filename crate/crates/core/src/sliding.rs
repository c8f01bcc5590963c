//! Gaussian-weighted sliding-window inference over a channel stack.
//!
//! A volume larger than the segmenter's patch size is covered by
//! overlapping tiles. Each tile is scored by the backend, the scores are
//! blended with a separable Gaussian window that favours tile centers
//! over borders, and the blended per-class probabilities are finalized
//! per voxel.
//!
//! Tiling is deterministic: starts advance by `patch * (1 - overlap)`
//! along each axis and a final tile is clamped flush with the volume
//! edge. Volumes smaller than the patch are padded virtually with zeros;
//! reads outside the volume return 0 and writes outside are dropped.
//!
//! Backends may emit probabilities or raw logits. A tile whose per-voxel
//! channel sums are all within `1e-3` of one is taken as probabilities;
//! any other tile is passed through a per-voxel softmax before blending.
//! Accumulation runs tile-serially into f32 buffers and finalization
//! divides and renormalizes in f64, so results are reproducible across
//! runs and thread counts.

use serde::{Deserialize, Serialize};

use crate::backend::{PatchTensor, SegmenterBackend};
use crate::error::{CoreError, Result};
use crate::volume::{Grid, Volume};

/// Tolerance for recognizing backend output as probabilities.
const PROBABILITY_SUM_TOLERANCE: f64 = 1e-3;

fn default_patch() -> [usize; 3] {
    [128, 128, 128]
}

fn default_overlap() -> f64 {
    0.5
}

fn default_sigma_fraction() -> f64 {
    0.125
}

/// Tiling parameters for sliding-window inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlidingWindowConfig {
    /// Patch size per axis, in voxels.
    #[serde(default = "default_patch")]
    pub patch: [usize; 3],
    /// Fraction of the patch shared by neighbouring tiles, `0 <= o < 1`.
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Gaussian sigma as a fraction of the patch edge.
    #[serde(default = "default_sigma_fraction")]
    pub sigma_fraction: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            patch: default_patch(),
            overlap: default_overlap(),
            sigma_fraction: default_sigma_fraction(),
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch.iter().any(|&p| p == 0) {
            return Err(CoreError::Config(format!(
                "sliding-window patch {:?} has a zero axis",
                self.patch
            )));
        }
        if !self.overlap.is_finite() || !(0.0..1.0).contains(&self.overlap) {
            return Err(CoreError::Config(format!(
                "sliding-window overlap must satisfy 0 <= overlap < 1, found {}",
                self.overlap
            )));
        }
        if !self.sigma_fraction.is_finite() || self.sigma_fraction <= 0.0 {
            return Err(CoreError::Config(format!(
                "sliding-window sigma fraction must be positive, found {}",
                self.sigma_fraction
            )));
        }
        Ok(())
    }

    /// Tile stride per axis: `patch * (1 - overlap)`, at least one voxel.
    pub fn stride(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for (out, &p) in s.iter_mut().zip(&self.patch) {
            *out = ((p as f64 * (1.0 - self.overlap)).round() as usize).max(1);
        }
        s
    }
}

/// Tile start offsets along one axis: `0, stride, 2*stride, ...` and a
/// final start clamped so the last tile ends flush with the (virtually
/// padded) axis. Covers every voxel in `0..dim` exactly.
pub fn tile_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let padded = dim.max(patch);
    let last = padded - patch;
    let mut starts = Vec::new();
    let mut s = 0;
    while s < last {
        starts.push(s);
        s += stride;
    }
    starts.push(last);
    starts
}

/// Per-axis Gaussian blending weights for a tile edge of `len` voxels.
///
/// The window peaks at the continuous center `(len - 1) / 2` with value 1
/// and decays with `sigma = sigma_fraction * len`.
pub fn gaussian_axis_weights(len: usize, sigma_fraction: f64) -> Vec<f64> {
    let center = (len as f64 - 1.0) / 2.0;
    let sigma = sigma_fraction * len as f64;
    let denom = 2.0 * sigma * sigma;
    (0..len)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / denom).exp()
        })
        .collect()
}

/// Blended per-class probabilities on a grid, class-major.
#[derive(Debug, Clone)]
pub struct ClassProbabilities {
    grid: Grid,
    classes: usize,
    data: Vec<f32>,
}

impl ClassProbabilities {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Probability of `class` at linear voxel index `idx`.
    pub fn probability(&self, idx: usize, class: usize) -> f32 {
        self.data[class * self.grid.len() + idx]
    }

    /// One class's probabilities over the whole volume.
    pub fn class_slice(&self, class: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[class * n..(class + 1) * n]
    }

    /// Winning class index per voxel; ties go to the smallest index.
    pub fn argmax_classes(&self) -> Volume<i32> {
        let n = self.grid.len();
        let mut out = Volume::<i32>::zeros(self.grid.clone());
        for i in 0..n {
            let mut best = 0usize;
            let mut best_p = self.data[i];
            for k in 1..self.classes {
                let p = self.data[k * n + i];
                if p > best_p {
                    best = k;
                    best_p = p;
                }
            }
            out.data_mut()[i] = best as i32;
        }
        out
    }

    /// Winning class per voxel mapped through `table`, where `table[k]`
    /// is the label id to write for class `k`.
    pub fn argmax_labels(&self, table: &[i32]) -> Result<Volume<i32>> {
        if table.len() != self.classes {
            return Err(CoreError::Config(format!(
                "label table has {} entries for {} classes",
                table.len(),
                self.classes
            )));
        }
        let mut vol = self.argmax_classes();
        for v in vol.data_mut() {
            *v = table[*v as usize];
        }
        Ok(vol)
    }
}

struct TileWeights {
    wx: Vec<f64>,
    wy: Vec<f64>,
    wz: Vec<f64>,
}

impl TileWeights {
    fn new(patch: [usize; 3], sigma_fraction: f64) -> TileWeights {
        TileWeights {
            wx: gaussian_axis_weights(patch[0], sigma_fraction),
            wy: gaussian_axis_weights(patch[1], sigma_fraction),
            wz: gaussian_axis_weights(patch[2], sigma_fraction),
        }
    }
}

/// Runs sliding-window inference of `backend` over a stack of input
/// channels sharing one grid, returning blended class probabilities.
pub fn infer_volume(
    channels: &[&Volume<f32>],
    backend: &mut dyn SegmenterBackend,
    config: &SlidingWindowConfig,
) -> Result<ClassProbabilities> {
    config.validate()?;
    if channels.is_empty() {
        return Err(CoreError::Config("no input channels supplied".to_string()));
    }
    let grid = channels[0].grid().clone();
    for (c, vol) in channels.iter().enumerate() {
        if !vol.grid().compatible(&grid) {
            return Err(CoreError::InvalidVolume(format!(
                "input channel {c} is on a different grid than channel 0"
            )));
        }
    }
    if backend.channels() != channels.len() {
        return Err(CoreError::Config(format!(
            "backend expects {} input channels, {} supplied",
            backend.channels(),
            channels.len()
        )));
    }
    let classes = backend.classes();
    if classes == 0 {
        return Err(CoreError::Config("backend declares zero classes".to_string()));
    }

    let (nx, ny, nz) = grid.dims();
    let n = grid.len();
    let patch = config.patch;
    let stride = config.stride();
    let weights = TileWeights::new(patch, config.sigma_fraction);

    let mut acc = vec![0.0f32; classes * n];
    let mut weight_sum = vec![0.0f32; n];
    let mut tile_in = PatchTensor::zeros(channels.len(), (patch[0], patch[1], patch[2]));
    let mut softmax_row = vec![0.0f64; classes];

    for &sz in &tile_starts(nz, patch[2], stride[2]) {
        for &sy in &tile_starts(ny, patch[1], stride[1]) {
            for &sx in &tile_starts(nx, patch[0], stride[0]) {
                extract_tile(channels, &grid, (sx, sy, sz), &mut tile_in);
                let scores = backend.predict(&tile_in)?;
                let tile_err = |what: &str| {
                    CoreError::BackendProtocol(format!(
                        "tile at ({sx},{sy},{sz}): {what}"
                    ))
                };
                if scores.channels() != classes {
                    return Err(tile_err(&format!(
                        "backend returned {} score channels, expected {}",
                        scores.channels(),
                        classes
                    )));
                }
                if scores.dims() != tile_in.dims() {
                    return Err(tile_err(&format!(
                        "backend returned scores on {:?}, expected {:?}",
                        scores.dims(),
                        tile_in.dims()
                    )));
                }
                if scores.data().iter().any(|v| !v.is_finite()) {
                    return Err(tile_err("backend returned a non-finite score"));
                }

                let as_probabilities = tile_is_probabilities(&scores);
                accumulate_tile(
                    &scores,
                    as_probabilities,
                    (sx, sy, sz),
                    (nx, ny, nz),
                    &weights,
                    &mut acc,
                    &mut weight_sum,
                    &mut softmax_row,
                );
            }
        }
    }

    finalize(grid, classes, acc, weight_sum)
}

/// Copies a tile's worth of every channel, reading zeros outside the
/// volume.
fn extract_tile(
    channels: &[&Volume<f32>],
    grid: &Grid,
    start: (usize, usize, usize),
    tile: &mut PatchTensor,
) {
    let (nx, ny, nz) = grid.dims();
    let (px, py, pz) = tile.dims();
    tile.data_mut().fill(0.0);
    let voxels = tile.voxels();
    for (c, vol) in channels.iter().enumerate() {
        let src = vol.data();
        for z in 0..pz {
            let gz = start.2 + z;
            if gz >= nz {
                break;
            }
            for y in 0..py {
                let gy = start.1 + y;
                if gy >= ny {
                    break;
                }
                let run = px.min(nx - start.0);
                if run == 0 {
                    break;
                }
                let src_base = start.0 + nx * (gy + ny * gz);
                let dst_base = c * voxels + px * (y + py * z);
                tile.data_mut()[dst_base..dst_base + run]
                    .copy_from_slice(&src[src_base..src_base + run]);
            }
        }
    }
}

/// A tile counts as probabilities when every voxel's channel sum is one
/// within tolerance.
fn tile_is_probabilities(scores: &PatchTensor) -> bool {
    let n = scores.voxels();
    let classes = scores.channels();
    for i in 0..n {
        let mut sum = 0.0f64;
        for k in 0..classes {
            sum += scores.data()[k * n + i] as f64;
        }
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return false;
        }
    }
    true
}

#[allow(clippy::too_many_arguments)]
fn accumulate_tile(
    scores: &PatchTensor,
    as_probabilities: bool,
    start: (usize, usize, usize),
    dims: (usize, usize, usize),
    weights: &TileWeights,
    acc: &mut [f32],
    weight_sum: &mut [f32],
    softmax_row: &mut [f64],
) {
    let (nx, ny, nz) = dims;
    let (px, py, pz) = scores.dims();
    let classes = scores.channels();
    let tile_voxels = scores.voxels();
    let n = nx * ny * nz;
    for z in 0..pz {
        let gz = start.2 + z;
        if gz >= nz {
            break;
        }
        for y in 0..py {
            let gy = start.1 + y;
            if gy >= ny {
                break;
            }
            let wyz = weights.wy[y] * weights.wz[z];
            for x in 0..px {
                let gx = start.0 + x;
                if gx >= nx {
                    break;
                }
                let w = weights.wx[x] * wyz;
                let t = x + px * (y + py * z);
                let g = gx + nx * (gy + ny * gz);
                if as_probabilities {
                    for k in 0..classes {
                        acc[k * n + g] += (w * scores.data()[k * tile_voxels + t] as f64) as f32;
                    }
                } else {
                    let mut max = f64::NEG_INFINITY;
                    for k in 0..classes {
                        max = max.max(scores.data()[k * tile_voxels + t] as f64);
                    }
                    let mut sum = 0.0;
                    for k in 0..classes {
                        let e = ((scores.data()[k * tile_voxels + t] as f64) - max).exp();
                        softmax_row[k] = e;
                        sum += e;
                    }
                    for k in 0..classes {
                        acc[k * n + g] += (w * softmax_row[k] / sum) as f32;
                    }
                }
                weight_sum[g] += w as f32;
            }
        }
    }
}

fn finalize(
    grid: Grid,
    classes: usize,
    acc: Vec<f32>,
    weight_sum: Vec<f32>,
) -> Result<ClassProbabilities> {
    let n = grid.len();
    let mut data = vec![0.0f32; classes * n];
    let mut row = vec![0.0f64; classes];
    for i in 0..n {
        let w = weight_sum[i] as f64;
        if w <= 0.0 {
            let (x, y, z) = grid.coords(i);
            return Err(CoreError::InvalidVolume(format!(
                "voxel ({x},{y},{z}) was covered by no tile"
            )));
        }
        let mut sum = 0.0f64;
        for k in 0..classes {
            let v = acc[k * n + i] as f64 / w;
            row[k] = v;
            sum += v;
        }
        if sum <= 0.0 {
            let (x, y, z) = grid.coords(i);
            return Err(CoreError::InvalidVolume(format!(
                "voxel ({x},{y},{z}) accumulated zero probability mass"
            )));
        }
        for k in 0..classes {
            data[k * n + i] = (row[k] / sum) as f32;
        }
    }
    Ok(ClassProbabilities { grid, classes, data })
}
