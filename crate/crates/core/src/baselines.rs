//! Off-the-shelf terrain derivatives and the OLS regression they feed.
//!
//! Stencil definitions (3×3 window, NODATA wherever any of the nine cells is
//! missing or the cell sits on the grid edge):
//!
//! - slope: Horn's 8-neighbor weighted gradient magnitude, units rise/run:
//!   dz/dx = ((NE+2E+SE) − (NW+2W+SW)) / (8·cell), likewise dz/dy;
//!   slope = √((dz/dx)² + (dz/dy)²).
//! - tri: Riley's Topographic Roughness Index,
//!   √(Σ over 8 neighbors (z_center − z_neighbor)²).
//! - roughness: max − min over the 3×3 window.
//! - curvature: the Laplacian from the Zevenbergen–Thorne quadratic fit,
//!   2D + 2E with D = ((z_W + z_E)/2 − z_C)/L² and E likewise north–south;
//!   positive in bowls, linear in z.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Site;
use crate::error::{CoreError, Result};
use crate::raster::Grid;

/// Applies f to every full 3×3 window; edge and NODATA-adjacent cells
/// become NODATA. The window is passed row-major, north row first.
fn stencil3(grid: &Grid, f: impl Fn(&[f64; 9], f64) -> f64) -> Grid {
    let mut out = grid.like();
    let cell = grid.cell_size();
    for row in 1..grid.n_rows().saturating_sub(1) {
        for col in 1..grid.n_cols().saturating_sub(1) {
            let mut w = [0.0; 9];
            let mut ok = true;
            'win: for dr in 0..3 {
                for dc in 0..3 {
                    match grid.get(row + dr - 1, col + dc - 1) {
                        Some(v) => w[dr * 3 + dc] = v,
                        None => {
                            ok = false;
                            break 'win;
                        }
                    }
                }
            }
            if ok {
                out.set(row, col, f(&w, cell));
            }
        }
    }
    out
}

/// Horn slope, rise/run.
pub fn slope(grid: &Grid) -> Grid {
    stencil3(grid, |w, cell| {
        // window indices: 0 NW, 1 N, 2 NE, 3 W, 4 C, 5 E, 6 SW, 7 S, 8 SE
        let dzdx = ((w[2] + 2.0 * w[5] + w[8]) - (w[0] + 2.0 * w[3] + w[6])) / (8.0 * cell);
        let dzdy = ((w[6] + 2.0 * w[7] + w[8]) - (w[0] + 2.0 * w[1] + w[2])) / (8.0 * cell);
        (dzdx * dzdx + dzdy * dzdy).sqrt()
    })
}

/// Riley's Topographic Roughness Index.
pub fn tri(grid: &Grid) -> Grid {
    stencil3(grid, |w, _| {
        let c = w[4];
        let mut sum = 0.0;
        for (i, &v) in w.iter().enumerate() {
            if i != 4 {
                sum += (c - v) * (c - v);
            }
        }
        sum.sqrt()
    })
}

/// Max − min of the 3×3 window.
pub fn roughness(grid: &Grid) -> Grid {
    stencil3(grid, |w, _| {
        let mut min = w[0];
        let mut max = w[0];
        for &v in &w[1..] {
            min = min.min(v);
            max = max.max(v);
        }
        max - min
    })
}

/// Laplacian curvature from the Zevenbergen–Thorne fit (2D + 2E).
pub fn curvature(grid: &Grid) -> Grid {
    stencil3(grid, |w, cell| {
        let d = ((w[3] + w[5]) / 2.0 - w[4]) / (cell * cell);
        let e = ((w[1] + w[7]) / 2.0 - w[4]) / (cell * cell);
        2.0 * d + 2.0 * e
    })
}

/// Named derivative grids sampled at sites, plus an intercept column.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    /// Column names; the first is always "intercept".
    pub columns: Vec<String>,
    /// Row-major values, one row per retained site.
    pub values: Vec<f64>,
    /// Indices into the input site list for the retained rows.
    pub site_indices: Vec<usize>,
    /// Sites dropped because a derivative was NODATA or off-grid at their
    /// location.
    pub excluded: usize,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.site_indices.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols()..(i + 1) * self.n_cols()]
    }
}

/// Nearest-cell sampling of each derivative grid at each site. Sites hitting
/// NODATA or falling off-grid are excluded and counted.
pub fn build_design_matrix(sites: &[Site], derivatives: &[(String, Grid)]) -> Result<DesignMatrix> {
    let mut names: Vec<String> = vec!["intercept".into()];
    for (name, _) in derivatives {
        if names.contains(name) {
            return Err(CoreError::InvalidArgument(format!(
                "duplicate derivative column '{name}'"
            )));
        }
        names.push(name.clone());
    }
    let p = names.len();
    let mut values = Vec::new();
    let mut site_indices = Vec::new();
    let mut excluded = 0usize;

    'sites: for (si, site) in sites.iter().enumerate() {
        let mut row = Vec::with_capacity(p);
        row.push(1.0);
        for (_, grid) in derivatives {
            let Some((r, c)) = grid.cell_at(site.easting, site.northing) else {
                excluded += 1;
                continue 'sites;
            };
            let Some(v) = grid.get(r, c) else {
                excluded += 1;
                continue 'sites;
            };
            row.push(v);
        }
        values.extend_from_slice(&row);
        site_indices.push(si);
    }
    Ok(DesignMatrix {
        columns: names,
        values,
        site_indices,
        excluded,
    })
}

/// Least-squares coefficients with residual diagnostics.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

/// τ minimizing ‖z − Xτ‖², solved by column-pivoted QR. Rank deficiency is
/// an error naming the collinear columns.
pub fn ols_fit(design: &DesignMatrix, z: &[f64]) -> Result<OlsFit> {
    let n = design.n_rows();
    let p = design.n_cols();
    if z.len() != n {
        return Err(CoreError::ShapeMismatch(format!(
            "{n} design rows vs {} targets",
            z.len()
        )));
    }
    if n <= p {
        return Err(CoreError::InvalidArgument(format!(
            "need more rows ({n}) than columns ({p})"
        )));
    }
    let x = DMatrix::from_row_slice(n, p, &design.values);
    let qr = x.clone().col_piv_qr();
    let eps = 1e-10 * qr.r().diagonal().amax().max(1.0);
    let rank = qr.r().diagonal().iter().filter(|d| d.abs() > eps).count();
    if rank < p {
        // apply the pivot sequence to an index vector to recover which
        // columns landed beyond the numerical rank
        let mut v = DVector::from_iterator(p, (0..p).map(|i| i as f64));
        qr.p().permute_rows(&mut v);
        let bad: Vec<String> = v
            .iter()
            .skip(rank)
            .map(|&f| design.columns[f as usize].clone())
            .collect();
        return Err(CoreError::RankDeficient(bad));
    }
    let zv = DVector::from_column_slice(z);
    let tau = x
        .clone()
        .svd(true, true)
        .solve(&zv, 1e-12)
        .map_err(|e| CoreError::Numerical(format!("least-squares solve failed: {e}")))?;
    let tau = DVector::from_column_slice(tau.as_slice());
    let fitted = &x * &tau;
    let residuals: Vec<f64> = zv.iter().zip(fitted.iter()).map(|(&o, &f)| o - f).collect();
    let r2 = crate::evaluation::r_squared(fitted.as_slice(), z)?;
    Ok(OlsFit {
        columns: design.columns.clone(),
        coefficients: tau.as_slice().to_vec(),
        residuals,
        r_squared: r2,
    })
}

/// ẑ = Xτ for new rows laid out like the fitting design.
pub fn ols_predict(design: &DesignMatrix, coefficients: &[f64]) -> Result<Vec<f64>> {
    if coefficients.len() != design.n_cols() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} coefficients for {} columns",
            coefficients.len(),
            design.n_cols()
        )));
    }
    Ok((0..design.n_rows())
        .map(|i| {
            design
                .row(i)
                .iter()
                .zip(coefficients.iter())
                .map(|(&x, &t)| x * t)
                .sum()
        })
        .collect())
}

/// Coefficients as CSV (`column,coefficient`).
pub fn write_coefficients_csv<W: Write>(fit: &OlsFit, mut w: W) -> std::io::Result<()> {
    writeln!(w, "column,coefficient")?;
    for (name, c) in fit.columns.iter().zip(fit.coefficients.iter()) {
        writeln!(w, "{name},{c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Grid {
        // row index counts from the north; f takes (x, y) with y northward
        let mut cells = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                cells.push(f(col, n - 1 - row));
            }
        }
        Grid::new(n, n, 1.0, 0.0, 0.0, -9999.0, cells).unwrap()
    }

    fn interior_values(g: &Grid) -> Vec<f64> {
        let mut out = Vec::new();
        for r in 1..g.n_rows() - 1 {
            for c in 1..g.n_cols() - 1 {
                out.push(g.get(r, c).expect("interior cell"));
            }
        }
        out
    }

    #[test]
    fn flat_grid_all_derivatives_zero() {
        let g = grid_from_fn(6, |_, _| 42.0);
        for d in [slope(&g), tri(&g), roughness(&g), curvature(&g)] {
            assert!(interior_values(&d).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn planar_ramp_slope_is_one() {
        let g = grid_from_fn(8, |x, _| x as f64);
        for v in interior_values(&slope(&g)) {
            assert!((v - 1.0).abs() < 1e-12);
        }
        // a plane has zero curvature
        for v in interior_values(&curvature(&g)) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn tri_single_neighbor() {
        let mut g = grid_from_fn(3, |_, _| 0.0);
        g.set(0, 0, 3.0);
        assert_eq!(tri(&g).get(1, 1), Some(3.0));
    }

    #[test]
    fn tri_monotone_in_neighbor_offset() {
        let mut g = grid_from_fn(3, |_, _| 1.0);
        let base = tri(&g).get(1, 1).unwrap();
        g.set(0, 1, 1.0 + 2.5);
        assert!(tri(&g).get(1, 1).unwrap() > base);
    }

    #[test]
    fn roughness_window_span() {
        let g = grid_from_fn(3, |x, y| (y * 3 + x) as f64);
        assert_eq!(roughness(&g).get(1, 1), Some(8.0));
        // shift invariance
        let g2 = grid_from_fn(3, |x, y| (y * 3 + x) as f64 + 100.0);
        assert_eq!(roughness(&g2).get(1, 1), Some(8.0));
    }

    #[test]
    fn bowl_curvature_matches_analytic() {
        // z = x² + y²: sampled second differences give exactly z_xx = z_yy = 2
        let g = grid_from_fn(9, |x, y| {
            let (x, y) = (x as f64 - 4.0, y as f64 - 4.0);
            x * x + y * y
        });
        for v in interior_values(&curvature(&g)) {
            assert!((v - 4.0).abs() < 1e-10, "got {v}");
        }
        // sign flips under grid negation
        let neg = grid_from_fn(9, |x, y| {
            let (x, y) = (x as f64 - 4.0, y as f64 - 4.0);
            -(x * x + y * y)
        });
        for v in interior_values(&curvature(&neg)) {
            assert!((v + 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn derivatives_translation_invariant() {
        let g = grid_from_fn(7, |x, y| ((x * 13 + y * 7) % 5) as f64);
        let shifted = grid_from_fn(7, |x, y| ((x * 13 + y * 7) % 5) as f64 + 250.0);
        for f in [slope, tri, roughness] {
            assert_eq!(interior_values(&f(&g)), interior_values(&f(&shifted)));
        }
        // curvature is linear in z, so a constant shift also cancels
        assert_eq!(
            interior_values(&curvature(&g)),
            interior_values(&curvature(&shifted))
        );
    }

    fn site_at(e: f64, n: f64) -> Site {
        Site {
            easting: e,
            northing: n,
            raw_value: Some(1.0),
            below_detection: false,
            lower_detection_limit: 0.0,
        }
    }

    #[test]
    fn design_matrix_basics() {
        let flat = grid_from_fn(5, |_, _| 0.0);
        let d = slope(&flat);
        let sites = vec![site_at(2.5, 2.5)];
        let dm = build_design_matrix(&sites, &[("slope".into(), d)]).unwrap();
        assert_eq!(dm.columns, vec!["intercept".to_string(), "slope".to_string()]);
        assert_eq!(dm.row(0), &[1.0, 0.0]);
        assert_eq!(dm.excluded, 0);
    }

    #[test]
    fn design_matrix_excludes_nodata_hits() {
        let flat = grid_from_fn(5, |_, _| 0.0);
        let d = slope(&flat); // edges are NODATA
        let sites = vec![site_at(0.5, 0.5), site_at(2.5, 2.5), site_at(99.0, 0.0)];
        let dm = build_design_matrix(&sites, &[("slope".into(), d)]).unwrap();
        assert_eq!(dm.n_rows(), 1);
        assert_eq!(dm.excluded, 2);
        assert_eq!(dm.site_indices, vec![1]);
    }

    #[test]
    fn intercept_only_fit_is_mean() {
        let dm = DesignMatrix {
            columns: vec!["intercept".into()],
            values: vec![1.0; 5],
            site_indices: (0..5).collect(),
            excluded: 0,
        };
        let z = [1.0, 2.0, 3.0, 4.0, 10.0];
        let fit = ols_fit(&dm, &z).unwrap();
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn exact_linear_data_recovered() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut values = Vec::new();
        for &xi in &x {
            values.extend_from_slice(&[1.0, xi]);
        }
        let dm = DesignMatrix {
            columns: vec!["intercept".into(), "x".into()],
            values,
            site_indices: (0..10).collect(),
            excluded: 0,
        };
        let z: Vec<f64> = x.iter().map(|&xi| 2.0 + 3.0 * xi).collect();
        let fit = ols_fit(&dm, &z).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let mut values = Vec::new();
        let mut z = Vec::new();
        for i in 0..50 {
            let x1 = (i as f64 * 0.73).sin();
            let x2 = (i as f64 * 1.91).cos();
            values.extend_from_slice(&[1.0, x1, x2]);
            z.push(1.5 + 0.5 * x1 - 2.0 * x2 + (i as f64 * 2.7).sin() * 0.3);
        }
        let dm = DesignMatrix {
            columns: vec!["intercept".into(), "a".into(), "b".into()],
            values,
            site_indices: (0..50).collect(),
            excluded: 0,
        };
        let fit = ols_fit(&dm, &z).unwrap();
        let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            let dot: f64 = (0..50).map(|i| dm.row(i)[c] * fit.residuals[i]).sum();
            assert!(dot.abs() < 1e-8 * znorm, "|Xᵀr| = {dot} on column {c}");
        }
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let mut values = Vec::new();
        for i in 0..10 {
            let x = i as f64;
            values.extend_from_slice(&[1.0, x, 2.0 * x]);
        }
        let dm = DesignMatrix {
            columns: vec!["intercept".into(), "x".into(), "x_doubled".into()],
            values,
            site_indices: (0..10).collect(),
            excluded: 0,
        };
        let z = vec![0.0; 10];
        match ols_fit(&dm, &z) {
            Err(CoreError::RankDeficient(cols)) => assert!(!cols.is_empty()),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }
}
