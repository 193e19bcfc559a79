//! Residual spatial model: Matheron empirical variogram, exponential model
//! fit, and ordinary kriging with a global neighborhood.
//!
//! Scoped to desk-scale data (up to a few thousand sites): every kriging
//! system uses all sites, factorized once and reused across queries.
//! Distances are planar Euclidean on projected coordinates.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::raster::Grid;

/// Matheron estimator output: binned semivariances with pair counts.
/// Bins with zero pairs keep semivariance 0 and are flagged by their count.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalVariogram {
    pub bin_centers: Vec<f64>,
    pub semivariance: Vec<f64>,
    pub pair_counts: Vec<usize>,
    pub max_lag: f64,
    pub bin_width: f64,
}

/// Exponential variogram γ(h) = c₀ + c₁(1 − exp(−h/a)) for h > 0, γ(0) = 0.
/// The nugget c₀ carries the iid noise variance, c₀+c₁ is the sill.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariogramModel {
    pub nugget: f64,
    pub partial_sill: f64,
    pub range: f64,
}

impl VariogramModel {
    pub fn validate(&self) -> Result<()> {
        if self.nugget < 0.0 || self.partial_sill < 0.0 || !(self.range > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "variogram parameters out of range: nugget {}, partial sill {}, range {}",
                self.nugget, self.partial_sill, self.range
            )));
        }
        Ok(())
    }

    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            0.0
        } else {
            self.nugget + self.partial_sill * (1.0 - (-h / self.range).exp())
        }
    }

    /// Semivariance between two *distinct* measurements: the limit h→0⁺ is
    /// the nugget, so coincident duplicate sites don't collapse the kriging
    /// system when c₀ > 0. γ(0) = 0 applies only to a point with itself.
    pub fn gamma_between(&self, h: f64) -> f64 {
        if h <= 0.0 {
            self.nugget
        } else {
            self.gamma(h)
        }
    }

    pub fn sill(&self) -> f64 {
        self.nugget + self.partial_sill
    }
}

/// r = z − d: the site-level estimate of the spatially correlated residual
/// plus noise. The mean is reported, not removed.
pub fn residuals(targets: &[f64], covariate_predictions: &[f64]) -> Result<(Vec<f64>, f64)> {
    if targets.len() != covariate_predictions.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} targets vs {} predictions",
            targets.len(),
            covariate_predictions.len()
        )));
    }
    let r: Vec<f64> = targets
        .iter()
        .zip(covariate_predictions.iter())
        .map(|(&z, &d)| z - d)
        .collect();
    let mean = r.iter().sum::<f64>() / r.len().max(1) as f64;
    Ok((r, mean))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Matheron estimator: γ̂(h) = Σ(rᵢ−rⱼ)² / (2·N(h)) over unordered pairs
/// binned by Euclidean distance, pairs beyond `max_lag` dropped.
pub fn empirical_variogram(
    coords: &[(f64, f64)],
    r: &[f64],
    bin_width: f64,
    max_lag: f64,
) -> Result<EmpiricalVariogram> {
    if coords.len() != r.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} coordinates vs {} residuals",
            coords.len(),
            r.len()
        )));
    }
    if coords.len() < 2 {
        return Err(CoreError::InvalidArgument(
            "variogram needs at least 2 sites".into(),
        ));
    }
    if !(bin_width > 0.0) || !(max_lag > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "bin_width ({bin_width}) and max_lag ({max_lag}) must be > 0"
        )));
    }
    let n_bins = (max_lag / bin_width).ceil() as usize;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            let h = dist(coords[i], coords[j]);
            if h > max_lag {
                continue;
            }
            let bin = ((h / bin_width) as usize).min(n_bins - 1);
            sums[bin] += (r[i] - r[j]) * (r[i] - r[j]);
            counts[bin] += 1;
        }
    }
    let semivariance = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| if c > 0 { s / (2.0 * c as f64) } else { 0.0 })
        .collect();
    Ok(EmpiricalVariogram {
        bin_centers: (0..n_bins).map(|b| (b as f64 + 0.5) * bin_width).collect(),
        semivariance,
        pair_counts: counts,
        max_lag,
        bin_width,
    })
}

/// CSV export: `lag,gamma,pairs`.
pub fn write_variogram_csv<W: Write>(v: &EmpiricalVariogram, mut w: W) -> std::io::Result<()> {
    writeln!(w, "lag,gamma,pairs")?;
    for i in 0..v.bin_centers.len() {
        writeln!(w, "{},{},{}", v.bin_centers[i], v.semivariance[i], v.pair_counts[i])?;
    }
    Ok(())
}

/// Pair-count-weighted least squares for (c₀, c₁) at fixed range a;
/// the objective is linear in the two variance parameters. Non-negativity
/// is enforced by also solving the clamped one-parameter problems and
/// keeping the best feasible fit.
fn wls_at_range(emp: &EmpiricalVariogram, a: f64) -> (f64, f64, f64) {
    let mut s_ww = 0.0;
    let mut s_wb = 0.0;
    let mut s_bb = 0.0;
    let mut s_wg = 0.0;
    let mut s_bg = 0.0;
    for i in 0..emp.bin_centers.len() {
        let w = emp.pair_counts[i] as f64;
        if w == 0.0 {
            continue;
        }
        let b = 1.0 - (-emp.bin_centers[i] / a).exp();
        let g = emp.semivariance[i];
        s_ww += w;
        s_wb += w * b;
        s_bb += w * b * b;
        s_wg += w * g;
        s_bg += w * b * g;
    }
    let objective = |c0: f64, c1: f64| -> f64 {
        let mut obj = 0.0;
        for i in 0..emp.bin_centers.len() {
            let w = emp.pair_counts[i] as f64;
            if w == 0.0 {
                continue;
            }
            let b = 1.0 - (-emp.bin_centers[i] / a).exp();
            let d = emp.semivariance[i] - c0 - c1 * b;
            obj += w * d * d;
        }
        obj
    };
    let det = s_ww * s_bb - s_wb * s_wb;
    let mut candidates = Vec::new();
    if det.abs() > 1e-300 {
        let c0 = (s_wg * s_bb - s_bg * s_wb) / det;
        let c1 = (s_bg * s_ww - s_wg * s_wb) / det;
        if c0 >= 0.0 && c1 >= 0.0 {
            candidates.push((c0, c1));
        }
    }
    // clamped edges of the feasible quadrant
    if s_bb > 0.0 {
        candidates.push((0.0, (s_bg / s_bb).max(0.0)));
    }
    if s_ww > 0.0 {
        candidates.push(((s_wg / s_ww).max(0.0), 0.0));
    }
    candidates
        .into_iter()
        .map(|(c0, c1)| (c0, c1, objective(c0, c1)))
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .unwrap_or((0.0, 0.0, f64::INFINITY))
}

/// Fits γ(h) = c₀ + c₁(1 − exp(−h/a)) by weighted least squares
/// (weights = pair counts), profiling the range over a log-spaced scan with
/// golden-section refinement. Degenerate inputs (all semivariances zero)
/// yield a nugget-only model.
pub fn fit_exponential(
    emp: &EmpiricalVariogram,
    init: Option<VariogramModel>,
) -> Result<VariogramModel> {
    let populated = emp.pair_counts.iter().filter(|&&c| c > 0).count();
    if populated < 3 {
        return Err(CoreError::InvalidArgument(format!(
            "need at least 3 non-empty bins, have {populated}"
        )));
    }
    let default_range = emp.max_lag / 3.0;
    if emp
        .semivariance
        .iter()
        .zip(emp.pair_counts.iter())
        .all(|(&g, &c)| c == 0 || g == 0.0)
    {
        return Ok(VariogramModel {
            nugget: 0.0,
            partial_sill: 0.0,
            range: default_range,
        });
    }

    let lo = (emp.bin_width * 0.05).max(1e-9);
    let hi = emp.max_lag * 10.0;
    let mut best = (f64::INFINITY, default_range, 0.0, 0.0);
    let consider = |a: f64, best: &mut (f64, f64, f64, f64)| {
        let (c0, c1, obj) = wls_at_range(emp, a);
        if obj < best.0 {
            *best = (obj, a, c0, c1);
        }
    };
    let scan = 256;
    for i in 0..=scan {
        let t = i as f64 / scan as f64;
        consider(lo * (hi / lo).powf(t), &mut best);
    }
    if let Some(m) = init {
        if m.range > 0.0 {
            consider(m.range, &mut best);
        }
    }
    // golden-section refinement around the best scanned range
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let step = (hi / lo).powf(1.0 / scan as f64);
    let mut a_lo = best.1 / step;
    let mut a_hi = best.1 * step;
    let mut x1 = a_hi - phi * (a_hi - a_lo);
    let mut x2 = a_lo + phi * (a_hi - a_lo);
    let mut f1 = wls_at_range(emp, x1).2;
    let mut f2 = wls_at_range(emp, x2).2;
    for _ in 0..200 {
        if f1 < f2 {
            a_hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = a_hi - phi * (a_hi - a_lo);
            f1 = wls_at_range(emp, x1).2;
        } else {
            a_lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = a_lo + phi * (a_hi - a_lo);
            f2 = wls_at_range(emp, x2).2;
        }
    }
    let a = (a_lo + a_hi) / 2.0;
    consider(a, &mut best);
    let model = VariogramModel {
        nugget: best.2,
        partial_sill: best.3,
        range: best.1,
    };
    model.validate()?;
    Ok(model)
}

/// Kriging output for one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrigeEstimate {
    pub mean: f64,
    pub variance: f64,
}

/// Factorized ordinary kriging system over all sites; queries reuse the
/// factorization.
pub struct KrigingSystem {
    coords: Vec<(f64, f64)>,
    residuals: Vec<f64>,
    model: VariogramModel,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl KrigingSystem {
    pub fn new(
        coords: &[(f64, f64)],
        residuals: &[f64],
        model: VariogramModel,
    ) -> Result<KrigingSystem> {
        model.validate()?;
        if coords.is_empty() || coords.len() != residuals.len() {
            return Err(CoreError::InvalidArgument(format!(
                "{} coordinates vs {} residuals",
                coords.len(),
                residuals.len()
            )));
        }
        if model.nugget == 0.0 {
            for i in 0..coords.len() {
                for j in (i + 1)..coords.len() {
                    if coords[i] == coords[j] {
                        return Err(CoreError::InvalidArgument(format!(
                            "duplicate sites {i} and {j} at ({}, {}) make the \
                             zero-nugget kriging system singular",
                            coords[i].0, coords[i].1
                        )));
                    }
                }
            }
        }
        let n = coords.len();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m[(i, j)] = model.gamma_between(dist(coords[i], coords[j]));
                }
            }
            m[(i, n)] = 1.0;
            m[(n, i)] = 1.0;
        }
        let lu = m.lu();
        Ok(KrigingSystem {
            coords: coords.to_vec(),
            residuals: residuals.to_vec(),
            model,
            lu,
        })
    }

    /// Kriging weights and Lagrange multiplier for a query point.
    pub fn weights(&self, query: (f64, f64)) -> Result<(Vec<f64>, f64)> {
        let n = self.coords.len();
        let mut rhs = DVector::zeros(n + 1);
        for i in 0..n {
            rhs[i] = self.model.gamma(dist(self.coords[i], query));
        }
        rhs[n] = 1.0;
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| CoreError::Numerical("singular kriging system".into()))?;
        Ok((sol.as_slice()[..n].to_vec(), sol[n]))
    }

    /// BLUP mean and kriging variance at a query point. A variance driven
    /// slightly negative by round-off is clamped to zero.
    pub fn predict(&self, query: (f64, f64)) -> Result<KrigeEstimate> {
        let (w, mu) = self.weights(query)?;
        let mut mean = 0.0;
        let mut variance = mu;
        for (i, &wi) in w.iter().enumerate() {
            mean += wi * self.residuals[i];
            variance += wi * self.model.gamma(dist(self.coords[i], query));
        }
        if variance < 0.0 {
            if variance < -1e-8 {
                eprintln!("warning: kriging variance {variance} clamped to 0");
            }
            variance = 0.0;
        }
        Ok(KrigeEstimate { mean, variance })
    }
}

/// Ordinary kriging at arbitrary query points.
pub fn ordinary_krige(
    coords: &[(f64, f64)],
    residuals: &[f64],
    model: VariogramModel,
    queries: &[(f64, f64)],
) -> Result<Vec<KrigeEstimate>> {
    let sys = KrigingSystem::new(coords, residuals, model)?;
    queries.iter().map(|&q| sys.predict(q)).collect()
}

/// Kriged residual field on the template's cell centers, at every
/// stride-th cell (other cells NODATA). Deterministic.
pub fn krige_residual_grid(
    coords: &[(f64, f64)],
    residuals: &[f64],
    model: VariogramModel,
    template: &Grid,
    stride: usize,
) -> Result<Grid> {
    if stride == 0 {
        return Err(CoreError::InvalidArgument("stride must be >= 1".into()));
    }
    let sys = KrigingSystem::new(coords, residuals, model)?;
    let mut out = template.like();
    let mut row = 0;
    while row < template.n_rows() {
        let mut col = 0;
        while col < template.n_cols() {
            let est = sys.predict(template.cell_center(row, col))?;
            out.set(row, col, est.mean);
            col += stride;
        }
        row += stride;
    }
    Ok(out)
}
