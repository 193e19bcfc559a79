//! Explanatory-power metrics on held-out data and observed-vs-predicted
//! exports.
//!
//! R² is computed as 1 − SS_res/SS_tot ("variance explained"), not squared
//! correlation: it can be negative for models worse than the mean and it
//! penalizes biased predictors. All metrics are reported on the transformed
//! target scale (e.g. log concentration).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FoldAssignment, TargetTransform};
use crate::error::{CoreError, Result};
use crate::network::{ArchConfig, ModelParameters};
use crate::training::{predict_indices, TargetScaling};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub r_squared: f64,
    pub n: usize,
    pub target_transform: TargetTransform,
}

/// 1 − Σ(obs−pred)² / Σ(obs−mean(obs))². Errors when obs is constant
/// (SS_tot = 0) or n < 2.
pub fn r_squared(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} predictions vs {} observations",
            pred.len(),
            obs.len()
        )));
    }
    if obs.len() < 2 {
        return Err(CoreError::InvalidArgument(
            "r_squared needs at least 2 observations".into(),
        ));
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|&o| (o - mean) * (o - mean)).sum();
    if ss_tot == 0.0 {
        return Err(CoreError::InvalidArgument(
            "r_squared undefined for constant observations".into(),
        ));
    }
    let ss_res: f64 = obs
        .iter()
        .zip(pred.iter())
        .map(|(&o, &p)| (o - p) * (o - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(CoreError::ShapeMismatch(format!(
            "mse over {} predictions vs {} observations",
            pred.len(),
            obs.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(obs.iter())
        .map(|(&p, &o)| (p - o) * (p - o))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Observed and predicted values for the test fold, in dataset order.
pub struct FoldPredictions {
    pub indices: Vec<usize>,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Eval-mode predictions on the test fold only.
pub fn predict_fold(
    params: &ModelParameters,
    arch: &ArchConfig,
    dataset: &Dataset,
    fold: &FoldAssignment,
    scaling: &TargetScaling,
) -> Result<FoldPredictions> {
    fold.validate()?;
    let indices = dataset.fold_indices(fold.test_fold);
    if indices.is_empty() {
        return Err(CoreError::InvalidArgument(format!(
            "test fold {} is empty",
            fold.test_fold
        )));
    }
    let predicted = predict_indices(params, arch, dataset, &indices, scaling)?;
    let observed = indices.iter().map(|&i| dataset.targets[i]).collect();
    Ok(FoldPredictions {
        indices,
        observed,
        predicted,
    })
}

/// Metrics on the held-out test fold, transformed-target scale.
pub fn evaluate_fold(
    params: &ModelParameters,
    arch: &ArchConfig,
    dataset: &Dataset,
    fold: &FoldAssignment,
    scaling: &TargetScaling,
) -> Result<Metrics> {
    let preds = predict_fold(params, arch, dataset, fold, scaling)?;
    Ok(Metrics {
        mse: mse(&preds.predicted, &preds.observed)?,
        r_squared: r_squared(&preds.predicted, &preds.observed)?,
        n: preds.indices.len(),
        target_transform: dataset.target_transform,
    })
}

/// Two-column CSV `observed,predicted`, rows in dataset order.
pub fn export_scatter<W: Write>(pred: &[f64], obs: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "observed,predicted")?;
    for (o, p) in obs.iter().zip(pred.iter()) {
        writeln!(w, "{o},{p}")?;
    }
    Ok(())
}

pub fn export_scatter_file(pred: &[f64], obs: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    export_scatter(pred, obs, std::io::BufWriter::new(f)).map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_one() {
        let obs = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&obs, &obs).unwrap(), 1.0);
    }

    #[test]
    fn mean_predictor_is_zero() {
        let obs = [1.0, 2.0, 3.0];
        let pred = [2.0, 2.0, 2.0];
        assert_eq!(r_squared(&pred, &obs).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_case() {
        // ss_res = 1, ss_tot = (1-7/3)² + (2-7/3)² + (4-7/3)² = 14/3
        let pred = [1.0, 2.0, 3.0];
        let obs = [1.0, 2.0, 4.0];
        let r2 = r_squared(&pred, &obs).unwrap();
        assert!((r2 - 11.0 / 14.0).abs() < 1e-12, "got {r2}");
    }

    #[test]
    fn constant_obs_rejected() {
        assert!(r_squared(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn r_squared_affine_invariance() {
        let pred = [0.5, 1.5, 2.0, 4.0];
        let obs = [1.0, 1.2, 2.5, 3.8];
        let base = r_squared(&pred, &obs).unwrap();
        let shift =
            r_squared(
                &pred.map(|v| v + 7.3),
                &obs.map(|v| v + 7.3),
            )
            .unwrap();
        let scale =
            r_squared(
                &pred.map(|v| v * -2.5),
                &obs.map(|v| v * -2.5),
            )
            .unwrap();
        assert!((base - shift).abs() < 1e-12);
        assert!((base - scale).abs() < 1e-12);
    }

    #[test]
    fn mse_symmetric_nonnegative() {
        let a = [1.0, 2.0];
        let b = [0.0, 4.0];
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(mse(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn scatter_export_format() {
        let mut buf = Vec::new();
        export_scatter(&[1.5, 2.5], &[1.0, 2.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "observed,predicted\n1,1.5\n2,2.5\n");

        let mut empty = Vec::new();
        export_scatter(&[], &[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "observed,predicted\n");
    }
}
