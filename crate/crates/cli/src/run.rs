//! Trained-run directory layout shared by the downstream commands
//! (`eval`, `map`, `krige`): arch.json, params.bin, run.json, history.csv
//! and the assembled dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use terratex_core::dataset::{load_dataset, Dataset, ExclusionReport, FoldAssignment, TargetTransform};
use terratex_core::error::{CoreError, Result};
use terratex_core::network::{load_parameters, ArchConfig, ModelParameters};
use terratex_core::training::{TargetScaling, TrainConfig};

/// Everything `eval`/`map`/`krige` need to interpret a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub transform: TargetTransform,
    pub fold: FoldAssignment,
    pub national_sd: f64,
    pub scaling: TargetScaling,
    pub patch_size: usize,
    pub dem_fingerprint: String,
    pub arch_fingerprint: String,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub best_holdout_mse: f64,
    pub exclusions: ExclusionReport,
}

pub struct LoadedRun {
    pub arch: ArchConfig,
    pub params: ModelParameters,
    pub info: RunInfo,
    pub dataset: Dataset,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let arch_path = dir.join("arch.json");
    let text = std::fs::read_to_string(&arch_path).map_err(|e| CoreError::io(&arch_path, e))?;
    let arch: ArchConfig = serde_json::from_str(&text)
        .map_err(|e| CoreError::format(&arch_path, e.to_string()))?;

    let info_path = dir.join("run.json");
    let text = std::fs::read_to_string(&info_path).map_err(|e| CoreError::io(&info_path, e))?;
    let info: RunInfo =
        serde_json::from_str(&text).map_err(|e| CoreError::format(&info_path, e.to_string()))?;
    if info.arch_fingerprint != arch.fingerprint() {
        return Err(CoreError::format(
            &info_path,
            "run.json does not match arch.json (fingerprint mismatch)".to_string(),
        ));
    }

    let params = load_parameters(dir.join("params.bin"), &arch)?;
    let dataset = load_dataset(dir.join("dataset"))?;
    Ok(LoadedRun {
        arch,
        params,
        info,
        dataset,
    })
}
