//! Per-voxel diffusion tensor estimation.
//!
//! The signal model is the monoexponential decay
//! `S_i = S0 * exp(-b_i * g_i^T D g_i)`; taking logs makes it linear in
//! the seven unknowns `(ln S0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)`, which are
//! solved per voxel by ordinary least squares. The design matrix depends
//! only on the gradient scheme, so its normal-equation factorization is
//! computed once and shared across all voxels.

use nalgebra::{Cholesky, SMatrix, SVector};
use rayon::prelude::*;

use crate::dwi::DwiSeries;
use crate::eigen::SymTensor;
use crate::error::{CoreError, Result};
use crate::volume::Grid;

/// Signals at or below this value are clamped before the log transform;
/// voxels whose mean baseline signal is at or below it are skipped.
pub const SIGNAL_EPSILON: f64 = 1e-6;

/// Rank-7 least-squares fit results for every voxel of a series.
#[derive(Debug, Clone)]
pub struct TensorField {
    grid: Grid,
    tensors: Vec<SymTensor>,
    log_s0: Vec<f64>,
    valid: Vec<bool>,
}

impl TensorField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Packed tensors `[xx, xy, xz, yy, yz, zz]` in square millimetres per
    /// second, zero at invalid voxels.
    pub fn tensors(&self) -> &[SymTensor] {
        &self.tensors
    }

    pub fn log_s0(&self) -> &[f64] {
        &self.log_s0
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// One design-matrix row for a measurement with b-value `b` and unit
/// direction `g`: the coefficients of `(ln S0, Dxx, Dxy, Dxz, Dyy, Dyz,
/// Dzz)` in `ln S = ln S0 - b g^T D g`.
fn design_row(b: f64, g: [f64; 3]) -> [f64; 7] {
    let [x, y, z] = g;
    [
        1.0,
        -b * x * x,
        -2.0 * b * x * y,
        -2.0 * b * x * z,
        -b * y * y,
        -2.0 * b * y * z,
        -b * z * z,
    ]
}

/// Fits the diffusion tensor at every voxel.
///
/// Consumes the baseline volumes plus one shell (see
/// [`crate::dwi::GradientScheme::fit_volume_indices`]). Signals are
/// clamped at [`SIGNAL_EPSILON`] before the log; voxels with a mean
/// baseline signal at or below the clamp are marked invalid and carry a
/// zero tensor. A gradient scheme whose design matrix has rank below 7 is
/// rejected up front.
pub fn fit_tensors(dwi: &DwiSeries) -> Result<TensorField> {
    let scheme = dwi.scheme();
    let indices = scheme.fit_volume_indices()?;

    let rows: Vec<[f64; 7]> = indices
        .iter()
        .map(|&i| design_row(scheme.bval(i), scheme.bvec(i)))
        .collect();

    let mut xtx = SMatrix::<f64, 7, 7>::zeros();
    for row in &rows {
        for a in 0..7 {
            for b in 0..7 {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }

    check_rank(&rows)?;
    let chol: Cholesky<f64, nalgebra::Const<7>> = Cholesky::new(xtx).ok_or_else(|| {
        CoreError::InsufficientScheme(
            "normal equations are not positive definite; directions are too degenerate"
                .to_string(),
        )
    })?;

    let baseline_rows: Vec<usize> = indices
        .iter()
        .enumerate()
        .filter(|(_, &vol)| scheme.is_baseline(vol))
        .map(|(row, _)| row)
        .collect();

    let volumes: Vec<&[f32]> = indices
        .iter()
        .map(|&i| dwi.volumes()[i].data())
        .collect();

    let n = dwi.grid().len();
    let mut tensors = vec![[0.0f64; 6]; n];
    let mut log_s0 = vec![0.0f64; n];
    let mut valid = vec![false; n];

    tensors
        .par_iter_mut()
        .zip(log_s0.par_iter_mut())
        .zip(valid.par_iter_mut())
        .enumerate()
        .for_each(|(voxel, ((tensor, ls0), ok))| {
            let mean_b0 = baseline_rows
                .iter()
                .map(|&r| volumes[r][voxel] as f64)
                .sum::<f64>()
                / baseline_rows.len() as f64;
            if mean_b0 <= SIGNAL_EPSILON {
                return;
            }

            let mut rhs = SVector::<f64, 7>::zeros();
            for (r, row) in rows.iter().enumerate() {
                let y = (volumes[r][voxel] as f64).max(SIGNAL_EPSILON).ln();
                for k in 0..7 {
                    rhs[k] += row[k] * y;
                }
            }
            let beta = chol.solve(&rhs);
            *ls0 = beta[0];
            tensor.copy_from_slice(&beta.as_slice()[1..7]);
            *ok = true;
        });

    Ok(TensorField {
        grid: dwi.grid().clone(),
        tensors,
        log_s0,
        valid,
    })
}

fn check_rank(rows: &[[f64; 7]]) -> Result<()> {
    let x = nalgebra::DMatrix::from_fn(rows.len(), 7, |r, c| rows[r][c]);
    let svd = x.svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * max_sv)
        .count();
    if rank < 7 {
        return Err(CoreError::InsufficientScheme(format!(
            "design matrix rank is {rank}, need 7; add non-coplanar gradient directions"
        )));
    }
    Ok(())
}

/// Simulates noiseless signals for a known tensor, the forward model used
/// by the fit. Exposed for fixture construction and round-trip testing.
pub fn simulate_signal(s0: f64, tensor: &SymTensor, b: f64, g: [f64; 3]) -> f64 {
    let [x, y, z] = g;
    let quad = tensor[0] * x * x
        + tensor[3] * y * y
        + tensor[5] * z * z
        + 2.0 * (tensor[1] * x * y + tensor[2] * x * z + tensor[4] * y * z);
    s0 * (-b * quad).exp()
}
