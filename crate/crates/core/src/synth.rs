//! Synthetic terrain and target generator: fractional-Brownian-style
//! surfaces via spectral synthesis, plus texture-derived targets with
//! known noise, so the whole pipeline can be exercised against worlds
//! with a known answer.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::baselines::{curvature, slope, tri};
use crate::dataset::Site;
use crate::error::{CoreError, Result};
use crate::raster::{grid_stats, Grid};
use crate::rng::{substream, Stream};

/// Target-generating rule applied to the terrain around each site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// standardized log(1 + TRI): nonlinear in every single derivative
    TriNonlinear,
    /// standardized slope: recoverable by the linear baseline
    SlopeLinear,
    /// 0.6·tri_nonlinear + 0.4·(standardized curvature)²
    Mixture,
}

impl std::str::FromStr for TargetRule {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tri_nonlinear" => Ok(TargetRule::TriNonlinear),
            "slope_linear" => Ok(TargetRule::SlopeLinear),
            "mixture" => Ok(TargetRule::Mixture),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown target rule '{other}' (expected tri_nonlinear, slope_linear or mixture)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthRecipe {
    /// grid edge length in cells; must be a power of two
    pub size: usize,
    /// Hurst exponent, open interval (0, 1); higher = smoother
    pub hurst_exponent: f64,
    pub target_rule: TargetRule,
    /// SD of the iid Gaussian noise added to targets, target units
    pub noise_sd: f64,
    pub n_sites: usize,
    /// vertical relief: terrain is rescaled to this elevation SD
    pub relief_sd: f64,
    /// signed-power warp exponent (≥ 1) applied to the unit-variance
    /// surface: z ← sign(z)·|z|^w. 1 = off. Values > 1 concentrate relief —
    /// and therefore local roughness — in the highs and lows, giving the
    /// spatially varying texture scale real terrain has
    pub relief_warp: f64,
    /// cell size of the emitted grid, map units
    pub cell_size: f64,
    pub seed: u64,
}

impl SynthRecipe {
    pub fn validate(&self) -> Result<()> {
        if !self.size.is_power_of_two() {
            return Err(CoreError::InvalidArgument(format!(
                "size must be a power of two, got {}",
                self.size
            )));
        }
        if !(self.hurst_exponent > 0.0 && self.hurst_exponent < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "hurst_exponent must lie in (0, 1), got {}",
                self.hurst_exponent
            )));
        }
        if self.n_sites < 10 {
            return Err(CoreError::InvalidArgument(format!(
                "n_sites must be >= 10, got {}",
                self.n_sites
            )));
        }
        if self.noise_sd < 0.0 || !(self.relief_sd > 0.0) || !(self.cell_size > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "noise_sd ({}) must be >= 0; relief_sd ({}) and cell_size ({}) must be > 0",
                self.noise_sd, self.relief_sd, self.cell_size
            )));
        }
        if !(self.relief_warp >= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "relief_warp must be >= 1, got {}",
                self.relief_warp
            )));
        }
        Ok(())
    }
}

impl Default for SynthRecipe {
    fn default() -> Self {
        SynthRecipe {
            size: 512,
            hurst_exponent: 0.7,
            target_rule: TargetRule::TriNonlinear,
            noise_sd: 0.3,
            n_sites: 5000,
            relief_sd: 100.0,
            relief_warp: 1.0,
            cell_size: 50.0,
            seed: 1,
        }
    }
}

/// Fractional-Brownian-style surface via spectral synthesis: iid complex
/// Gaussian Fourier coefficients shaped by the power-law amplitude
/// |f|^−(H+1), inverse transform, real part, mean subtracted. Deterministic
/// per seed; size must be a power of two.
pub fn fractal_terrain(size: usize, hurst_exponent: f64, seed: u64) -> Result<Grid> {
    if !size.is_power_of_two() {
        return Err(CoreError::InvalidArgument(format!(
            "size must be a power of two, got {size}"
        )));
    }
    if !(hurst_exponent > 0.0 && hurst_exponent < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "hurst_exponent must lie in (0, 1), got {hurst_exponent}"
        )));
    }
    let mut rng = substream(seed, Stream::Terrain, &[]);
    let n = size;
    let mut spectrum = vec![Complex::new(0.0, 0.0); n * n];
    for ky in 0..n {
        let fy = ky.min(n - ky) as f64;
        for kx in 0..n {
            let fx = kx.min(n - kx) as f64;
            // draw in fixed order so the spectrum is deterministic per seed
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            if kx == 0 && ky == 0 {
                continue; // zero DC; the mean is subtracted anyway
            }
            let amp = (fx * fx + fy * fy).sqrt().powf(-(hurst_exponent + 1.0));
            spectrum[ky * n + kx] = Complex::new(re * amp, im * amp);
        }
    }

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    // rows
    for row in spectrum.chunks_exact_mut(n) {
        ifft.process(row);
    }
    // columns, via transpose–rows–transpose
    let mut transposed = vec![Complex::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            transposed[c * n + r] = spectrum[r * n + c];
        }
    }
    for row in transposed.chunks_exact_mut(n) {
        ifft.process(row);
    }

    let mut cells = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            cells[r * n + c] = transposed[c * n + r].re;
        }
    }
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    for v in &mut cells {
        *v -= mean;
    }
    Grid::new(n, n, 1.0, 0.0, 0.0, -9999.0, cells)
}

/// The terrain normalized to unit variance, warped, then rescaled to the
/// recipe's vertical relief and cell size.
pub fn recipe_terrain(recipe: &SynthRecipe) -> Result<Grid> {
    recipe.validate()?;
    let raw = fractal_terrain(recipe.size, recipe.hurst_exponent, recipe.seed)?;
    let stats = grid_stats(&raw)?;
    if stats.sd == 0.0 {
        return Err(CoreError::Numerical("degenerate flat terrain draw".into()));
    }
    let warped: Vec<f64> = raw
        .cells()
        .iter()
        .map(|&v| {
            let z = v / stats.sd;
            z.signum() * z.abs().powf(recipe.relief_warp)
        })
        .collect();
    let mean = warped.iter().sum::<f64>() / warped.len() as f64;
    let var = warped.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / warped.len() as f64;
    let scale = recipe.relief_sd / var.sqrt();
    let cells = warped.iter().map(|&v| (v - mean) * scale).collect();
    Grid::new(
        recipe.size,
        recipe.size,
        recipe.cell_size,
        0.0,
        0.0,
        -9999.0,
        cells,
    )
}

/// A generated sampling campaign over a synthetic terrain.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub sites: Vec<Site>,
    /// noiseless function values f at the sites, in target units
    pub true_values: Vec<f64>,
    /// Var(f) / (Var(f) + noise_sd²): the R² any predictor of the noisy
    /// targets can approach but not beat, estimated from the drawn sites
    pub r_squared_ceiling: f64,
}

fn standardized(grid: &Grid) -> Result<Grid> {
    let stats = grid_stats(grid)?;
    if stats.sd == 0.0 {
        return Err(CoreError::Numerical(
            "cannot standardize a constant derivative grid".into(),
        ));
    }
    let mut out = grid.like();
    for r in 0..grid.n_rows() {
        for c in 0..grid.n_cols() {
            if let Some(v) = grid.get(r, c) {
                out.set(r, c, (v - stats.mean) / stats.sd);
            }
        }
    }
    Ok(out)
}

/// The noiseless target field for a rule, NODATA on the 1-cell derivative
/// border.
pub fn rule_field(rule: TargetRule, terrain: &Grid) -> Result<Grid> {
    match rule {
        TargetRule::TriNonlinear => {
            let t = tri(terrain);
            let mut logged = t.like();
            for r in 0..t.n_rows() {
                for c in 0..t.n_cols() {
                    if let Some(v) = t.get(r, c) {
                        logged.set(r, c, (1.0 + v).ln());
                    }
                }
            }
            standardized(&logged)
        }
        TargetRule::SlopeLinear => standardized(&slope(terrain)),
        TargetRule::Mixture => {
            let base = rule_field(TargetRule::TriNonlinear, terrain)?;
            let curv = standardized(&curvature(terrain))?;
            let mut out = base.like();
            for r in 0..base.n_rows() {
                for c in 0..base.n_cols() {
                    if let (Some(a), Some(b)) = (base.get(r, c), curv.get(r, c)) {
                        out.set(r, c, 0.6 * a + 0.4 * b * b);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Draws `n_sites` uniform-random cells at least `margin` cells from every
/// grid edge (so each admits a full patch), evaluates the rule field there,
/// and adds N(0, noise_sd²) observation noise. Sites land on cell centers.
pub fn generate_sites(recipe: &SynthRecipe, terrain: &Grid, margin: usize) -> Result<SynthDataset> {
    recipe.validate()?;
    if terrain.n_rows() <= 2 * margin || terrain.n_cols() <= 2 * margin {
        return Err(CoreError::InvalidArgument(format!(
            "margin {margin} leaves no interior in a {}x{} grid",
            terrain.n_rows(),
            terrain.n_cols()
        )));
    }
    let field = rule_field(recipe.target_rule, terrain)?;

    let mut site_rng = substream(recipe.seed, Stream::Sites, &[]);
    let mut noise_rng = substream(recipe.seed, Stream::TargetNoise, &[]);
    let mut sites = Vec::with_capacity(recipe.n_sites);
    let mut true_values = Vec::with_capacity(recipe.n_sites);
    for _ in 0..recipe.n_sites {
        let (row, col, f) = loop {
            let row = site_rng.gen_range(margin..terrain.n_rows() - margin);
            let col = site_rng.gen_range(margin..terrain.n_cols() - margin);
            // derivative border is inside the margin for margin >= 1, but
            // guard anyway
            if let Some(f) = field.get(row, col) {
                break (row, col, f);
            }
        };
        let (easting, northing) = terrain.cell_center(row, col);
        let noise: f64 = noise_rng.sample::<f64, _>(StandardNormal) * recipe.noise_sd;
        sites.push(Site {
            easting,
            northing,
            raw_value: Some(f + noise),
            below_detection: false,
            lower_detection_limit: 0.0,
        });
        true_values.push(f);
    }

    let mean = true_values.iter().sum::<f64>() / true_values.len() as f64;
    let var_f = true_values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / true_values.len() as f64;
    let denom = var_f + recipe.noise_sd * recipe.noise_sd;
    let r_squared_ceiling = if denom > 0.0 { var_f / denom } else { 0.0 };

    Ok(SynthDataset {
        sites,
        true_values,
        r_squared_ceiling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terrain_mean_zero_and_deterministic() {
        let a = fractal_terrain(32, 0.7, 9).unwrap();
        let b = fractal_terrain(32, 0.7, 9).unwrap();
        assert_eq!(a.cells(), b.cells());
        let mean = a.cells().iter().sum::<f64>() / a.cells().len() as f64;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        let c = fractal_terrain(32, 0.7, 10).unwrap();
        assert_ne!(a.cells(), c.cells());
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(fractal_terrain(100, 0.5, 1).is_err());
        assert!(fractal_terrain(64, 1.0, 1).is_err());
        assert!(fractal_terrain(64, 0.0, 1).is_err());
    }

    fn mean_abs_adjacent_diff(g: &Grid) -> f64 {
        let sd = grid_stats(g).unwrap().sd;
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..g.n_rows() {
            for c in 1..g.n_cols() {
                total += (g.value(r, c) - g.value(r, c - 1)).abs() / sd;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn high_hurst_is_smoother() {
        let smooth = fractal_terrain(64, 0.9, 3).unwrap();
        let rough = fractal_terrain(64, 0.1, 3).unwrap();
        assert!(mean_abs_adjacent_diff(&smooth) < mean_abs_adjacent_diff(&rough));
    }

    #[test]
    fn recipe_terrain_hits_relief_sd() {
        let recipe = SynthRecipe {
            size: 64,
            n_sites: 10,
            ..Default::default()
        };
        let g = recipe_terrain(&recipe).unwrap();
        let stats = grid_stats(&g).unwrap();
        assert!((stats.sd - recipe.relief_sd).abs() < 1e-9);
        assert_eq!(g.cell_size(), recipe.cell_size);
    }

    fn small_recipe(rule: TargetRule, noise_sd: f64) -> SynthRecipe {
        SynthRecipe {
            size: 64,
            hurst_exponent: 0.7,
            target_rule: rule,
            noise_sd,
            n_sites: 200,
            relief_sd: 100.0,
            relief_warp: 1.0,
            cell_size: 50.0,
            seed: 11,
        }
    }

    #[test]
    fn noiseless_targets_are_deterministic_in_location() {
        let recipe = small_recipe(TargetRule::TriNonlinear, 0.0);
        let terrain = recipe_terrain(&recipe).unwrap();
        let field = rule_field(recipe.target_rule, &terrain).unwrap();
        let ds = generate_sites(&recipe, &terrain, 16).unwrap();
        for (site, &f) in ds.sites.iter().zip(ds.true_values.iter()) {
            assert_eq!(site.raw_value, Some(f));
            let (row, col) = terrain.cell_at(site.easting, site.northing).unwrap();
            assert_eq!(field.value(row, col), f);
        }
    }

    #[test]
    fn sites_respect_margin() {
        let recipe = small_recipe(TargetRule::SlopeLinear, 0.1);
        let terrain = recipe_terrain(&recipe).unwrap();
        let ds = generate_sites(&recipe, &terrain, 16).unwrap();
        for site in &ds.sites {
            let (row, col) = terrain.cell_at(site.easting, site.northing).unwrap();
            assert!((16..64 - 16).contains(&row), "row {row}");
            assert!((16..64 - 16).contains(&col), "col {col}");
        }
        // too large a margin: no interior left
        assert!(generate_sites(&recipe, &terrain, 32).is_err());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let recipe = small_recipe(TargetRule::Mixture, 0.2);
        let terrain = recipe_terrain(&recipe).unwrap();
        let a = generate_sites(&recipe, &terrain, 16).unwrap();
        let b = generate_sites(&recipe, &terrain, 16).unwrap();
        assert_eq!(a.sites, b.sites);
        assert_eq!(a.true_values, b.true_values);
    }

    #[test]
    fn noiseless_slope_rule_is_linear_in_slope() {
        use crate::baselines::{build_design_matrix, ols_fit};
        let recipe = small_recipe(TargetRule::SlopeLinear, 0.0);
        let terrain = recipe_terrain(&recipe).unwrap();
        let ds = generate_sites(&recipe, &terrain, 16).unwrap();
        let design =
            build_design_matrix(&ds.sites, &[("slope".to_string(), slope(&terrain))]).unwrap();
        let z: Vec<f64> = ds.sites.iter().map(|s| s.raw_value.unwrap()).collect();
        let fit = ols_fit(&design, &z).unwrap();
        assert!(fit.r_squared > 0.99, "R² {}", fit.r_squared);
    }

    #[test]
    fn ceiling_matches_empirical_r_squared() {
        use crate::evaluation::r_squared;
        let recipe = SynthRecipe {
            size: 128,
            n_sites: 2000,
            noise_sd: 0.5,
            ..Default::default()
        };
        let terrain = recipe_terrain(&recipe).unwrap();
        let ds = generate_sites(&recipe, &terrain, 16).unwrap();
        let noisy: Vec<f64> = ds.sites.iter().map(|s| s.raw_value.unwrap()).collect();
        let empirical = r_squared(&ds.true_values, &noisy).unwrap();
        assert!(
            (empirical - ds.r_squared_ceiling).abs() < 0.05,
            "empirical {empirical} vs ceiling {}",
            ds.r_squared_ceiling
        );
        assert!(ds.r_squared_ceiling > 0.0 && ds.r_squared_ceiling < 1.0);
    }

    #[test]
    fn zero_noise_ceiling_is_one() {
        let recipe = small_recipe(TargetRule::TriNonlinear, 0.0);
        let terrain = recipe_terrain(&recipe).unwrap();
        let ds = generate_sites(&recipe, &terrain, 16).unwrap();
        assert_eq!(ds.r_squared_ceiling, 1.0);
    }
}
