//! Sliding-window prediction over a full grid: the deep-learned covariate
//! map, and composition with a kriged residual field.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::dataset::{extract_patch_at_cell, normalize_patch};
use crate::error::{CoreError, Result};
use crate::network::{predict, ArchConfig, ModelParameters};
use crate::raster::Grid;
use crate::training::TargetScaling;

/// Provenance of a covariate map, written as a sidecar manifest so that
/// incompatible artifacts cannot be mixed downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapProvenance {
    pub model_fingerprint: String,
    pub source_grid_fingerprint: String,
    pub stride: usize,
    pub patch_size: usize,
}

/// Network predictions over a grid, in transformed-target units.
#[derive(Debug, Clone)]
pub struct CovariateGrid {
    pub grid: Grid,
    pub provenance: MapProvenance,
}

/// Runs the network at every stride-th cell: patch extraction, normalization
/// and an eval-mode forward, batched for throughput. Cells whose window is
/// off-grid or touches NODATA stay NODATA, so the output keeps the source
/// grid's georeferencing and a NODATA border band of width floor(k/2).
///
/// Outputs are un-standardized through `scaling`, i.e. transformed-target
/// units.
pub fn predict_grid(
    params: &ModelParameters,
    arch: &ArchConfig,
    grid: &Grid,
    national_sd: f64,
    scaling: &TargetScaling,
    stride: usize,
    batch_size: usize,
    model_fingerprint: &str,
) -> Result<CovariateGrid> {
    if stride == 0 {
        return Err(CoreError::InvalidArgument("stride must be >= 1".into()));
    }
    if batch_size == 0 {
        return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
    }
    let k = arch.input_size;
    let mut out = grid.like();
    if grid.n_rows() < k || grid.n_cols() < k {
        eprintln!(
            "warning: grid {}x{} smaller than the {k}-cell window; output is all NODATA",
            grid.n_rows(),
            grid.n_cols()
        );
    }

    let mut pending: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(batch_size);
    let flush = |pending: &mut Vec<(usize, usize, Vec<f64>)>, out: &mut Grid| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let n = pending.len();
        let mut data = Vec::with_capacity(n * k * k);
        for (_, _, values) in pending.iter() {
            data.extend_from_slice(values);
        }
        let batch = Tensor::new(vec![n, 1, k, k], data);
        let preds = predict(params, arch, &batch)?;
        for ((row, col, _), &p) in pending.iter().zip(preds.iter()) {
            out.set(*row, *col, scaling.unstandardize(p));
        }
        pending.clear();
        Ok(())
    };

    let mut row = 0;
    while row < grid.n_rows() {
        let mut col = 0;
        while col < grid.n_cols() {
            if let Ok(raw) = extract_patch_at_cell(grid, row, col, k) {
                let (e, n) = grid.cell_center(row, col);
                let patch = normalize_patch(&raw, k, national_sd, e, n)?;
                pending.push((row, col, patch.values));
                if pending.len() == batch_size {
                    flush(&mut pending, &mut out)?;
                }
            }
            col += stride;
        }
        row += stride;
    }
    flush(&mut pending, &mut out)?;

    Ok(CovariateGrid {
        grid: out,
        provenance: MapProvenance {
            model_fingerprint: model_fingerprint.to_string(),
            source_grid_fingerprint: grid.fingerprint(),
            stride,
            patch_size: k,
        },
    })
}

/// Cell-wise sum of the covariate map and a residual field (Z = D + û).
/// NODATA in either input propagates. The grids must share georeferencing.
pub fn compose_prediction(covariate: &Grid, residual: &Grid) -> Result<Grid> {
    if !covariate.same_georeference(residual) {
        return Err(CoreError::GridMismatch(format!(
            "covariate {}x{} (cell {}) vs residual {}x{} (cell {})",
            covariate.n_rows(),
            covariate.n_cols(),
            covariate.cell_size(),
            residual.n_rows(),
            residual.n_cols(),
            residual.cell_size()
        )));
    }
    let mut out = covariate.like();
    for row in 0..covariate.n_rows() {
        for col in 0..covariate.n_cols() {
            if let (Some(a), Some(b)) = (covariate.get(row, col), residual.get(row, col)) {
                out.set(row, col, a + b);
            }
        }
    }
    Ok(out)
}
