//! Diffusion-weighted series and their gradient tables.
//!
//! Gradient tables arrive as FSL-style sidecars: a `.bval` file with one
//! whitespace-separated b-value per volume and a `.bvec` file with three
//! rows (x, y, z components). A [`DwiSeries`] couples the 4-D signal with
//! a validated [`GradientScheme`].

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::volume::Volume;

/// b-values at or below this threshold count as baseline (b0) volumes.
/// Scanners often store nominally unweighted volumes with small nonzero
/// b-values; the threshold matches the shell-selection tolerance.
pub const BASELINE_B_MAX: f64 = 50.0;

/// Nominal b-value of the shell consumed by the tensor fit.
pub const TARGET_SHELL_B: f64 = 1000.0;

/// Half-width of a shell: b-values within this distance of the nominal
/// value belong to the shell.
pub const SHELL_TOLERANCE: f64 = 50.0;

/// Per-volume acquisition parameters: b-value and gradient direction.
#[derive(Debug, Clone)]
pub struct GradientScheme {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl GradientScheme {
    /// Validates and stores a gradient table.
    ///
    /// Requirements: equal counts, finite values, non-negative b-values,
    /// at least one baseline volume, unit-norm directions (within 1e-6)
    /// wherever b is above the baseline threshold, and at least six
    /// pairwise non-collinear weighted directions.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(scheme_err(format!(
                "{} b-values but {} directions",
                bvals.len(),
                bvecs.len()
            )));
        }
        for (i, &b) in bvals.iter().enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(scheme_err(format!("b-value {b} at volume {i} is invalid")));
            }
        }
        let mut weighted_dirs: Vec<[f64; 3]> = Vec::new();
        for (i, (&b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if g.iter().any(|c| !c.is_finite()) {
                return Err(scheme_err(format!("direction at volume {i} is non-finite")));
            }
            if b > BASELINE_B_MAX {
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(scheme_err(format!(
                        "direction at volume {i} has norm {norm}, expected 1 within 1e-6"
                    )));
                }
                let collinear = weighted_dirs.iter().any(|d| {
                    let dot = d[0] * g[0] + d[1] * g[1] + d[2] * g[2];
                    dot.abs() >= 1.0 - 1e-6
                });
                if !collinear {
                    weighted_dirs.push(*g);
                }
            }
        }
        if !bvals.iter().any(|&b| b <= BASELINE_B_MAX) {
            return Err(scheme_err("no baseline (b = 0) volume".to_string()));
        }
        if weighted_dirs.len() < 6 {
            return Err(scheme_err(format!(
                "only {} distinct non-collinear weighted directions, need at least 6",
                weighted_dirs.len()
            )));
        }
        Ok(GradientScheme { bvals, bvecs })
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bval(&self, i: usize) -> f64 {
        self.bvals[i]
    }

    pub fn bvec(&self, i: usize) -> [f64; 3] {
        self.bvecs[i]
    }

    pub fn is_baseline(&self, i: usize) -> bool {
        self.bvals[i] <= BASELINE_B_MAX
    }

    /// Indices of the volumes the tensor fit consumes: every baseline plus
    /// one diffusion-weighted shell.
    ///
    /// When the weighted volumes span several shells, the shell at
    /// b = 1000 (within the tolerance) wins and the others are dropped.
    /// A single-shell acquisition at any b is consumed as-is. A multi-shell
    /// acquisition without a b = 1000 shell is rejected rather than
    /// guessing which shell was meant.
    pub fn fit_volume_indices(&self) -> Result<Vec<usize>> {
        let weighted: Vec<usize> = (0..self.len()).filter(|&i| !self.is_baseline(i)).collect();
        let target: Vec<usize> = weighted
            .iter()
            .copied()
            .filter(|&i| (self.bvals[i] - TARGET_SHELL_B).abs() <= SHELL_TOLERANCE)
            .collect();

        let chosen: Vec<usize> = if !target.is_empty() {
            target
        } else {
            let min = weighted.iter().map(|&i| self.bvals[i]).fold(f64::MAX, f64::min);
            let max = weighted.iter().map(|&i| self.bvals[i]).fold(f64::MIN, f64::max);
            if max - min <= 2.0 * SHELL_TOLERANCE {
                weighted
            } else {
                return Err(scheme_err(format!(
                    "multi-shell b-values in [{min}, {max}] with no shell at b = {TARGET_SHELL_B}"
                )));
            }
        };

        let mut selected: Vec<usize> =
            (0..self.len()).filter(|&i| self.is_baseline(i)).collect();
        selected.extend(chosen);
        selected.sort_unstable();
        Ok(selected)
    }
}

fn scheme_err(reason: String) -> CoreError {
    CoreError::GradientTable { path: None, reason }
}

/// A diffusion-weighted acquisition: one float volume per table entry,
/// all on the same grid.
#[derive(Debug, Clone)]
pub struct DwiSeries {
    volumes: Vec<Volume<f32>>,
    scheme: GradientScheme,
}

impl DwiSeries {
    pub fn new(volumes: Vec<Volume<f32>>, scheme: GradientScheme) -> Result<Self> {
        if volumes.len() != scheme.len() {
            return Err(scheme_err(format!(
                "{} volumes but {} gradient table entries",
                volumes.len(),
                scheme.len()
            )));
        }
        let first = volumes
            .first()
            .ok_or_else(|| scheme_err("series is empty".to_string()))?;
        for (i, v) in volumes.iter().enumerate() {
            if v.grid() != first.grid() {
                return Err(CoreError::InvalidVolume(format!(
                    "series volume {i} is on a different grid than volume 0"
                )));
            }
        }
        Ok(DwiSeries { volumes, scheme })
    }

    pub fn volumes(&self) -> &[Volume<f32>] {
        &self.volumes
    }

    pub fn scheme(&self) -> &GradientScheme {
        &self.scheme
    }

    pub fn grid(&self) -> &crate::volume::Grid {
        self.volumes[0].grid()
    }
}

/// Parses an FSL `.bval` sidecar: whitespace-separated b-values.
pub fn read_bvals(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_numbers(&text)
        .map_err(|reason| CoreError::GradientTable {
            path: Some(path.to_path_buf()),
            reason,
        })
}

/// Parses an FSL `.bvec` sidecar: three rows of x, y, z components.
pub fn read_bvecs(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let table_err = |reason: String| CoreError::GradientTable {
        path: Some(path.to_path_buf()),
        reason,
    };
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_numbers(l).map_err(table_err))
        .collect::<Result<_>>()?;
    if rows.len() != 3 {
        return Err(table_err(format!(
            "expected 3 component rows, found {}",
            rows.len()
        )));
    }
    if rows[1].len() != rows[0].len() || rows[2].len() != rows[0].len() {
        return Err(table_err(format!(
            "component rows have unequal lengths {}, {}, {}",
            rows[0].len(),
            rows[1].len(),
            rows[2].len()
        )));
    }
    Ok((0..rows[0].len())
        .map(|i| [rows[0][i], rows[1][i], rows[2][i]])
        .collect())
}

/// Generates `n` unit directions spread over the sphere by the Fibonacci
/// lattice, handy for synthetic acquisition schemes. No two outputs are
/// collinear for any practical `n`.
pub fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let v = [r * phi.cos(), r * phi.sin(), z];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / norm, v[1] / norm, v[2] / norm]
        })
        .collect()
}

fn parse_numbers(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| format!("cannot parse {tok:?} as a number"))
        })
        .collect()
}
