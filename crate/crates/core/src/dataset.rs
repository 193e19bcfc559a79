//! Supervised dataset construction: patch extraction and normalization,
//! target preprocessing (detection limits, log transform), fold assignment,
//! site CSV I/O and the on-disk dataset directory format.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::raster::Grid;
use crate::rng::{substream, Stream};

/// A point-sampled observation. `raw_value` is None for NA targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub easting: f64,
    pub northing: f64,
    pub raw_value: Option<f64>,
    pub below_detection: bool,
    pub lower_detection_limit: f64,
}

impl Site {
    pub fn validate(&self) -> Result<()> {
        if !self.easting.is_finite() || !self.northing.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "site coordinates must be finite, got ({}, {})",
                self.easting, self.northing
            )));
        }
        if self.below_detection && !(self.lower_detection_limit > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "below-detection site needs a positive detection limit, got {}",
                self.lower_detection_limit
            )));
        }
        Ok(())
    }
}

/// Normalized k×k terrain window; the center cell is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f64>,
    pub k: usize,
    pub center_easting: f64,
    pub center_northing: f64,
}

/// Target transform applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetTransform {
    Identity,
    Log,
}

impl std::str::FromStr for TargetTransform {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(TargetTransform::Identity),
            "log" => Ok(TargetTransform::Log),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown target transform '{other}' (expected identity|log)"
            ))),
        }
    }
}

/// Paired patches and transformed targets with site metadata and fold labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub patches: Vec<Patch>,
    pub targets: Vec<f64>,
    pub sites: Vec<Site>,
    pub target_transform: TargetTransform,
    pub fold_labels: Vec<u32>,
    pub k_folds: u32,
    pub patch_size: usize,
    pub national_sd: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn assign_folds(&mut self, k_folds: u32, seed: u64) -> Result<()> {
        self.fold_labels = split_folds(self.len(), k_folds, seed)?;
        self.k_folds = k_folds;
        Ok(())
    }

    pub fn fold_indices(&self, fold: u32) -> Vec<usize> {
        self.fold_labels
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Held-out fold selection for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k_folds: u32,
    pub test_fold: u32,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "k_folds must be >= 2, got {}",
                self.k_folds
            )));
        }
        if self.test_fold >= self.k_folds {
            return Err(CoreError::InvalidArgument(format!(
                "test fold {} out of range for {} folds",
                self.test_fold, self.k_folds
            )));
        }
        Ok(())
    }
}

/// Why sites were dropped during dataset assembly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub input_sites: usize,
    pub accepted: usize,
    pub na_target: usize,
    pub off_grid: usize,
    pub nodata_window: usize,
    pub non_positive_log: usize,
    /// identifiers (input index and coordinates) of the sites rejected by
    /// the log transform
    pub non_positive_log_sites: Vec<String>,
}

/// Censored values are substituted with half the lower detection limit.
/// Returns None for NA targets.
pub fn apply_detection_limit(site: &Site) -> Option<f64> {
    if site.below_detection {
        Some(site.lower_detection_limit / 2.0)
    } else {
        site.raw_value
    }
}

/// Natural log or identity. Non-positive values under log are rejected with
/// the offending site named by the caller.
pub fn transform_target(value: f64, transform: TargetTransform) -> Result<f64> {
    match transform {
        TargetTransform::Identity => Ok(value),
        TargetTransform::Log => {
            if value > 0.0 {
                Ok(value.ln())
            } else {
                Err(CoreError::InvalidArgument(format!(
                    "log transform of non-positive value {value}"
                )))
            }
        }
    }
}

/// Patch extraction failure; the site is excluded and counted, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchRejection {
    OffGrid,
    NodataWindow,
}

/// Raw k×k elevations around a cell. Row/col offsets run from −floor(k/2)
/// to −floor(k/2)+k−1 (for k=32: −16..15). Rejected if any window cell is
/// off-grid or NODATA.
pub fn extract_patch_at_cell(
    grid: &Grid,
    row: usize,
    col: usize,
    k: usize,
) -> std::result::Result<Vec<f64>, PatchRejection> {
    let half = (k / 2) as isize;
    let r0 = row as isize - half;
    let c0 = col as isize - half;
    if r0 < 0
        || c0 < 0
        || r0 + k as isize > grid.n_rows() as isize
        || c0 + k as isize > grid.n_cols() as isize
    {
        return Err(PatchRejection::OffGrid);
    }
    let mut out = Vec::with_capacity(k * k);
    for dr in 0..k {
        for dc in 0..k {
            match grid.get((r0 as usize) + dr, (c0 as usize) + dc) {
                Some(v) => out.push(v),
                None => return Err(PatchRejection::NodataWindow),
            }
        }
    }
    Ok(out)
}

/// Raw window centred on the cell containing the point.
pub fn extract_patch(
    grid: &Grid,
    easting: f64,
    northing: f64,
    k: usize,
) -> std::result::Result<Vec<f64>, PatchRejection> {
    let (row, col) = grid.cell_at(easting, northing).ok_or(PatchRejection::OffGrid)?;
    extract_patch_at_cell(grid, row, col, k)
}

/// value[i][j] = (raw[i][j] − raw[center]) / national_sd, with the center at
/// (floor(k/2), floor(k/2)). This removes absolute elevation: the center is
/// exactly zero and the patch is invariant under constant elevation shifts.
pub fn normalize_patch(
    raw: &[f64],
    k: usize,
    national_sd: f64,
    center_easting: f64,
    center_northing: f64,
) -> Result<Patch> {
    if !(national_sd > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "national_sd must be > 0, got {national_sd}"
        )));
    }
    if raw.len() != k * k {
        return Err(CoreError::ShapeMismatch(format!(
            "raw patch has {} values, expected {}",
            raw.len(),
            k * k
        )));
    }
    let center = raw[(k / 2) * k + (k / 2)];
    let values = raw.iter().map(|&v| (v - center) / national_sd).collect();
    Ok(Patch {
        values,
        k,
        center_easting,
        center_northing,
    })
}

/// Dataset assembly parameters.
#[derive(Debug, Clone, Copy)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub transform: TargetTransform,
}

/// One record per accepted site, in input order. Excluded sites are counted
/// by reason; accepted + excluded always equals the input count.
pub fn assemble_dataset(
    grid: &Grid,
    national_sd: f64,
    sites: &[Site],
    config: &DatasetConfig,
) -> Result<(Dataset, ExclusionReport)> {
    let mut report = ExclusionReport {
        input_sites: sites.len(),
        ..Default::default()
    };
    let mut patches = Vec::new();
    let mut targets = Vec::new();
    let mut kept_sites = Vec::new();

    for (index, site) in sites.iter().enumerate() {
        site.validate()?;
        let Some(value) = apply_detection_limit(site) else {
            report.na_target += 1;
            continue;
        };
        let target = match transform_target(value, config.transform) {
            Ok(t) => t,
            Err(_) => {
                report.non_positive_log += 1;
                report.non_positive_log_sites.push(format!(
                    "site {index} at ({}, {})",
                    site.easting, site.northing
                ));
                continue;
            }
        };
        let raw = match extract_patch(grid, site.easting, site.northing, config.patch_size) {
            Ok(raw) => raw,
            Err(PatchRejection::OffGrid) => {
                report.off_grid += 1;
                continue;
            }
            Err(PatchRejection::NodataWindow) => {
                report.nodata_window += 1;
                continue;
            }
        };
        patches.push(normalize_patch(
            &raw,
            config.patch_size,
            national_sd,
            site.easting,
            site.northing,
        )?);
        targets.push(target);
        kept_sites.push(site.clone());
    }

    report.accepted = patches.len();
    if patches.is_empty() {
        return Err(CoreError::InvalidArgument(
            "no sites survived dataset assembly".into(),
        ));
    }
    Ok((
        Dataset {
            patches,
            targets,
            sites: kept_sites,
            target_transform: config.transform,
            fold_labels: Vec::new(),
            k_folds: 0,
            patch_size: config.patch_size,
            national_sd,
        },
        report,
    ))
}

/// Random fold labels via a seeded permutation; fold sizes differ by at
/// most 1 and the same seed always yields the same labels.
pub fn split_folds(n: usize, k_folds: u32, seed: u64) -> Result<Vec<u32>> {
    if k_folds < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "k_folds must be >= 2, got {k_folds}"
        )));
    }
    if n < k_folds as usize {
        return Err(CoreError::InvalidArgument(format!(
            "cannot split {n} records into {k_folds} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, Stream::FoldSplit, &[]);
    perm.shuffle(&mut rng);
    let mut labels = vec![0u32; n];
    for (i, &idx) in perm.iter().enumerate() {
        labels[idx] = (i % k_folds as usize) as u32;
    }
    Ok(labels)
}

/// Packs patches into an N×1×k×k batch tensor for the network.
pub fn make_batch(dataset: &Dataset, indices: &[usize]) -> crate::autograd::Tensor {
    let k = dataset.patch_size;
    let mut data = Vec::with_capacity(indices.len() * k * k);
    for &i in indices {
        data.extend_from_slice(&dataset.patches[i].values);
    }
    crate::autograd::Tensor::new(vec![indices.len(), 1, k, k], data)
}

pub const SITES_CSV_HEADER: &str = "easting,northing,value,below_lod,lod";

/// Reads the site CSV: header `easting,northing,value,below_lod,lod`,
/// decimal point, UTF-8. `value` may be NA; `lod` may be empty when the
/// site is not censored.
pub fn read_sites_csv<R: BufRead>(reader: R) -> Result<Vec<Site>> {
    let mut sites = Vec::new();
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or(CoreError::Parse {
        line: 1,
        message: "empty site file".into(),
    })?;
    let header = header.map_err(|e| CoreError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.trim() != SITES_CSV_HEADER {
        return Err(CoreError::Parse {
            line: 1,
            message: format!("expected header '{SITES_CSV_HEADER}', got '{}'", header.trim()),
        });
    }
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| CoreError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(CoreError::Parse {
                line: lineno,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let num = |f: &str, what: &str| -> Result<f64> {
            f.parse::<f64>().map_err(|_| CoreError::Parse {
                line: lineno,
                message: format!("non-numeric {what} '{f}'"),
            })
        };
        let value = if fields[2].eq_ignore_ascii_case("na") || fields[2].is_empty() {
            None
        } else {
            Some(num(fields[2], "value")?)
        };
        let below = match fields[3].to_ascii_lowercase().as_str() {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(CoreError::Parse {
                    line: lineno,
                    message: format!("below_lod must be true/false/1/0, got '{other}'"),
                });
            }
        };
        let lod = if fields[4].is_empty() {
            0.0
        } else {
            num(fields[4], "lod")?
        };
        let site = Site {
            easting: num(fields[0], "easting")?,
            northing: num(fields[1], "northing")?,
            raw_value: value,
            below_detection: below,
            lower_detection_limit: lod,
        };
        site.validate().map_err(|e| CoreError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        sites.push(site);
    }
    Ok(sites)
}

pub fn read_sites_csv_file(path: impl AsRef<Path>) -> Result<Vec<Site>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_sites_csv(std::io::BufReader::new(f))
}

pub fn write_sites_csv<W: Write>(sites: &[Site], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{SITES_CSV_HEADER}")?;
    for s in sites {
        let value = match s.raw_value {
            Some(v) => format!("{v}"),
            None => "NA".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            s.easting,
            s.northing,
            value,
            if s.below_detection { "true" } else { "false" },
            s.lower_detection_limit
        )?;
    }
    Ok(())
}

pub fn write_sites_csv_file(sites: &[Site], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    write_sites_csv(sites, std::io::BufWriter::new(f)).map_err(|e| CoreError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    n: usize,
    patch_size: usize,
    target_transform: TargetTransform,
    national_sd: f64,
    k_folds: u32,
}

/// Serializes a dataset to a directory: `manifest.json`, `patches.bin`
/// (raw little-endian f64, n·k·k values), `targets.csv`, `folds.csv` and
/// `sites.csv`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;

    let manifest = DatasetManifest {
        format_version: crate::FORMAT_VERSION,
        n: dataset.len(),
        patch_size: dataset.patch_size,
        target_transform: dataset.target_transform,
        national_sd: dataset.national_sd,
        k_folds: dataset.k_folds,
    };
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| CoreError::io(&mpath, e))?;

    let ppath = dir.join("patches.bin");
    let mut blob = Vec::with_capacity(dataset.len() * dataset.patch_size * dataset.patch_size * 8);
    for p in &dataset.patches {
        for v in &p.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(&ppath, blob).map_err(|e| CoreError::io(&ppath, e))?;

    let tpath = dir.join("targets.csv");
    let mut t = String::from("index,target\n");
    for (i, v) in dataset.targets.iter().enumerate() {
        t.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(&tpath, t).map_err(|e| CoreError::io(&tpath, e))?;

    let fpath = dir.join("folds.csv");
    let mut f = String::from("index,fold\n");
    for (i, v) in dataset.fold_labels.iter().enumerate() {
        f.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(&fpath, f).map_err(|e| CoreError::io(&fpath, e))?;

    write_sites_csv_file(&dataset.sites, dir.join("sites.csv"))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| CoreError::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&mtext)
        .map_err(|e| CoreError::format(&mpath, e.to_string()))?;
    if manifest.format_version != crate::FORMAT_VERSION {
        return Err(CoreError::format(
            &mpath,
            format!(
                "format version {} unsupported (expected {})",
                manifest.format_version,
                crate::FORMAT_VERSION
            ),
        ));
    }

    let sites = read_sites_csv_file(dir.join("sites.csv"))?;
    if sites.len() != manifest.n {
        return Err(CoreError::format(
            dir.join("sites.csv"),
            format!("{} sites but manifest says {}", sites.len(), manifest.n),
        ));
    }

    let ppath = dir.join("patches.bin");
    let blob = std::fs::read(&ppath).map_err(|e| CoreError::io(&ppath, e))?;
    let k = manifest.patch_size;
    let expected = manifest.n * k * k * 8;
    if blob.len() != expected {
        return Err(CoreError::format(
            &ppath,
            format!("{} bytes, expected {expected}", blob.len()),
        ));
    }
    let mut patches = Vec::with_capacity(manifest.n);
    for (i, chunk) in blob.chunks_exact(k * k * 8).enumerate() {
        let values: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        patches.push(Patch {
            values,
            k,
            center_easting: sites[i].easting,
            center_northing: sites[i].northing,
        });
    }

    let read_indexed = |name: &str, what: &str| -> Result<Vec<f64>> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let (_, v) = line.split_once(',').ok_or_else(|| CoreError::Parse {
                line: i + 1,
                message: format!("malformed {what} row"),
            })?;
            out.push(v.parse::<f64>().map_err(|_| CoreError::Parse {
                line: i + 1,
                message: format!("non-numeric {what} '{v}'"),
            })?);
        }
        Ok(out)
    };
    let targets = read_indexed("targets.csv", "target")?;
    let fold_labels: Vec<u32> = read_indexed("folds.csv", "fold")?
        .into_iter()
        .map(|v| v as u32)
        .collect();

    Ok(Dataset {
        patches,
        targets,
        sites,
        target_transform: manifest.target_transform,
        fold_labels,
        k_folds: manifest.k_folds,
        patch_size: k,
        national_sd: manifest.national_sd,
    })
}
