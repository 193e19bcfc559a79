//! `terratex`: pipeline driver. Every artifact of the workflow — synthetic
//! worlds, trained networks, covariate maps, baselines, kriged residual
//! fields and composed predictions — is producible from these subcommands.
//!
//! Errors are reported as a single `error: ...` line on stderr with a
//! nonzero exit. Output locations are write-once unless `--force` is given,
//! and every output directory carries exactly one `manifest.json` recording
//! the resolved configuration and input fingerprints.

mod manifest;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use terratex_core::baselines::{
    build_design_matrix, curvature, ols_fit, roughness, slope, tri, write_coefficients_csv,
};
use terratex_core::dataset::{
    apply_detection_limit, assemble_dataset, read_sites_csv_file, save_dataset, transform_target,
    DatasetConfig, FoldAssignment, TargetTransform,
};
use terratex_core::error::CoreError;
use terratex_core::evaluation::{evaluate_fold, export_scatter_file, predict_fold};
use terratex_core::geostat::{
    empirical_variogram, fit_exponential, krige_residual_grid, residuals, write_variogram_csv,
};
use terratex_core::mapgen::{compose_prediction, predict_grid};
use terratex_core::network::{build_network, save_parameters, ArchConfig};
use terratex_core::raster::{
    block_aggregate, grid_stats, read_ascii_grid_file, render_png, write_ascii_grid_file,
    ColorRamp, Grid,
};
use terratex_core::synth::{generate_sites, recipe_terrain, SynthRecipe, TargetRule};
use terratex_core::training::{predict_indices, train, TrainConfig};

use manifest::{file_fingerprint, prepare_out_dir, write_manifest};
use run::{load_run, RunInfo};

fn version_string() -> String {
    format!(
        "{} (parameter format v{})",
        terratex_core::VERSION,
        terratex_core::FORMAT_VERSION
    )
}

#[derive(Parser)]
#[command(name = "terratex", version = version_string(), about = "Terrain-texture covariate learning pipeline")]
struct Cli {
    /// Worker-parallelism cap; 1 guarantees bit-determinism (and is also
    /// the current implementation's only level of parallelism)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a DEM and optionally block-aggregate it to a coarser resolution
    Ingest(IngestArgs),
    /// Generate a synthetic terrain and sampling campaign
    Synth(SynthArgs),
    /// Train the texture network on DEM patches at sample sites
    Train(TrainArgs),
    /// Evaluate a trained run on its held-out fold
    Eval(EvalArgs),
    /// Slide the trained network over a DEM to produce the covariate map
    Map(MapArgs),
    /// Classical terrain-derivative OLS baseline
    Baseline(BaselineArgs),
    /// Variogram fit and ordinary kriging of model residuals
    Krige(KrigeArgs),
    /// Compose covariate map and residual field into the final prediction
    Compose(ComposeArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Input DEM, ESRI ASCII grid
    #[arg(long)]
    dem: PathBuf,
    /// Block-aggregation factor (1 = copy-through)
    #[arg(long, default_value_t = 1)]
    aggregate: usize,
    /// Output .asc path; a manifest is written alongside
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Grid edge length in cells (power of two)
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Hurst exponent in (0, 1); higher = smoother terrain
    #[arg(long, default_value_t = 0.7)]
    hurst: f64,
    /// Target rule: tri_nonlinear | slope_linear | mixture
    #[arg(long, default_value = "tri_nonlinear")]
    rule: String,
    #[arg(long, default_value_t = 5000)]
    sites: usize,
    /// Target noise SD
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Terrain vertical relief (elevation SD)
    #[arg(long, default_value_t = 100.0)]
    relief: f64,
    /// Signed-power relief warp exponent (1 = off); > 1 concentrates
    /// roughness in highs and lows
    #[arg(long, default_value_t = 1.0)]
    warp: f64,
    /// Cell size in map units
    #[arg(long, default_value_t = 50.0)]
    cell: f64,
    /// Edge margin in cells so every site admits a full patch
    #[arg(long, default_value_t = 16)]
    margin: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Flat key/value config file; command-line flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dem: Option<PathBuf>,
    /// Site CSV (easting,northing,value,below_lod,lod)
    #[arg(long)]
    sites: Option<PathBuf>,
    /// Target transform: identity | log
    #[arg(long)]
    transform: Option<String>,
    /// Architecture config file; omitted = the full-scale default network
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Patch edge length in cells
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    folds: Option<u32>,
    /// Held-out fold index; defaults to folds − 1
    #[arg(long)]
    test_fold: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience in epochs; 0 disables early stopping
    #[arg(long)]
    patience: Option<usize>,
    /// Output run directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `train`
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dem: PathBuf,
    /// Predict every stride-th cell; other cells stay NODATA
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Also render the map as a PNG
    #[arg(long)]
    png: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    dem: PathBuf,
    #[arg(long)]
    sites: PathBuf,
    /// Comma-separated subset of slope,tri,roughness,curvature
    #[arg(long, default_value = "slope,tri,roughness,curvature")]
    derivatives: String,
    /// Target transform: identity | log
    #[arg(long, default_value = "identity")]
    transform: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct KrigeArgs {
    #[arg(long)]
    run: PathBuf,
    /// DEM template for the kriged residual grid; omit to fit the
    /// variogram only
    #[arg(long)]
    dem: Option<PathBuf>,
    /// Krige every stride-th cell of the template
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Variogram bin width in map units; default max-lag / 15
    #[arg(long)]
    bin_width: Option<f64>,
    /// Maximum pair separation; default half the site bounding-box diagonal
    #[arg(long)]
    max_lag: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ComposeArgs {
    /// Covariate map (.asc) from `map`
    #[arg(long)]
    cov: PathBuf,
    /// Residual field (.asc) from `krige`
    #[arg(long)]
    resid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: invalid argument: --threads must be >= 1");
        std::process::exit(1);
    }
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Map(a) => cmd_map(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Krige(a) => cmd_krige(a),
        Command::Compose(a) => cmd_compose(a),
    };
    if let Err(e) = result {
        // single-line machine-parsable error contract
        eprintln!("error: {}", e.to_string().replace('\n', " "));
        std::process::exit(1);
    }
}

type CliResult = Result<(), CoreError>;

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CoreError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}

fn cmd_ingest(args: IngestArgs) -> CliResult {
    let grid = read_ascii_grid_file(&args.dem)?;
    if args.out.exists() && !args.force {
        return Err(CoreError::InvalidArgument(format!(
            "output {} exists (use --force to overwrite)",
            args.out.display()
        )));
    }
    let out_grid = block_aggregate(&grid, args.aggregate)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    write_ascii_grid_file(&out_grid, &args.out)?;
    let manifest_path = args.out.with_extension("asc.manifest.json");
    write_manifest(
        &manifest_path,
        "ingest",
        BTreeMap::from([("aggregate".into(), args.aggregate.to_string())]),
        BTreeMap::from([(args.dem.display().to_string(), grid.fingerprint())]),
        0,
    )?;
    println!(
        "ingested {} -> {} ({}x{} cells, cell size {})",
        args.dem.display(),
        args.out.display(),
        out_grid.n_rows(),
        out_grid.n_cols(),
        out_grid.cell_size()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let recipe = SynthRecipe {
        size: args.size,
        hurst_exponent: args.hurst,
        target_rule: args.rule.parse::<TargetRule>()?,
        noise_sd: args.noise,
        n_sites: args.sites,
        relief_sd: args.relief,
        relief_warp: args.warp,
        cell_size: args.cell,
        seed: args.seed,
    };
    recipe.validate()?;
    let terrain = recipe_terrain(&recipe)?;
    let ds = generate_sites(&recipe, &terrain, args.margin)?;
    prepare_out_dir(&args.out, args.force)?;
    write_ascii_grid_file(&terrain, args.out.join("terrain.asc"))?;
    terratex_core::dataset::write_sites_csv_file(&ds.sites, args.out.join("sites.csv"))?;
    {
        use std::io::Write;
        let path = args.out.join("truth.csv");
        let mut f = std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        writeln!(f, "easting,northing,true_value").map_err(|e| CoreError::io(&path, e))?;
        for (site, t) in ds.sites.iter().zip(ds.true_values.iter()) {
            writeln!(f, "{},{},{}", site.easting, site.northing, t)
                .map_err(|e| CoreError::io(&path, e))?;
        }
    }
    write_json(
        &args.out.join("generator.json"),
        &serde_json::json!({
            "recipe": recipe,
            "r_squared_ceiling": ds.r_squared_ceiling,
        }),
    )?;
    write_manifest(
        &args.out.join("manifest.json"),
        "synth",
        BTreeMap::from([
            ("size".into(), args.size.to_string()),
            ("hurst".into(), args.hurst.to_string()),
            ("rule".into(), args.rule.clone()),
            ("sites".into(), args.sites.to_string()),
            ("noise".into(), args.noise.to_string()),
            ("relief".into(), args.relief.to_string()),
            ("warp".into(), args.warp.to_string()),
            ("cell".into(), args.cell.to_string()),
            ("margin".into(), args.margin.to_string()),
        ]),
        BTreeMap::new(),
        args.seed,
    )?;
    println!(
        "generated {} sites on a {}x{} terrain; r_squared_ceiling = {}",
        ds.sites.len(),
        args.size,
        args.size,
        ds.r_squared_ceiling
    );
    Ok(())
}

/// Applies `key = value` lines from a config file for any flag the user did
/// not pass explicitly; flags win.
fn merge_train_config(args: &mut TrainArgs, path: &Path) -> Result<(), CoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CoreError::Parse {
            line: lineno + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let parse_err = |what: &str| CoreError::Parse {
            line: lineno + 1,
            message: format!("bad {what} value '{value}'"),
        };
        match key {
            "dem" => args.dem.get_or_insert_with(|| PathBuf::from(value)),
            "sites" => args.sites.get_or_insert_with(|| PathBuf::from(value)),
            "arch" => args.arch.get_or_insert_with(|| PathBuf::from(value)),
            "out" => args.out.get_or_insert_with(|| PathBuf::from(value)),
            "transform" => {
                args.transform.get_or_insert_with(|| value.to_string());
                continue;
            }
            "patch" => {
                args.patch = Some(
                    args.patch
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("patch"))?),
                );
                continue;
            }
            "folds" => {
                args.folds = Some(
                    args.folds
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("folds"))?),
                );
                continue;
            }
            "test_fold" => {
                args.test_fold = Some(
                    args.test_fold
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("test_fold"))?),
                );
                continue;
            }
            "seed" => {
                args.seed = Some(
                    args.seed
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("seed"))?),
                );
                continue;
            }
            "epochs" => {
                args.epochs = Some(
                    args.epochs
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("epochs"))?),
                );
                continue;
            }
            "batch" => {
                args.batch = Some(
                    args.batch
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("batch"))?),
                );
                continue;
            }
            "lr" => {
                args.lr = Some(
                    args.lr
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("lr"))?),
                );
                continue;
            }
            "patience" => {
                args.patience = Some(
                    args.patience
                        .take()
                        .unwrap_or(value.parse().map_err(|_| parse_err("patience"))?),
                );
                continue;
            }
            other => {
                return Err(CoreError::Parse {
                    line: lineno + 1,
                    message: format!("unknown config key '{other}'"),
                })
            }
        };
    }
    Ok(())
}

fn cmd_train(mut args: TrainArgs) -> CliResult {
    if let Some(config) = args.config.clone() {
        merge_train_config(&mut args, &config)?;
    }
    let missing = |flag: &str| {
        CoreError::InvalidArgument(format!("--{flag} is required (flag or config file)"))
    };
    let dem_path = args.dem.ok_or_else(|| missing("dem"))?;
    let sites_path = args.sites.ok_or_else(|| missing("sites"))?;
    let out = args.out.ok_or_else(|| missing("out"))?;
    let transform: TargetTransform = args
        .transform
        .as_deref()
        .unwrap_or("identity")
        .parse()?;
    let folds = args.folds.unwrap_or(10);
    let fold = FoldAssignment {
        k_folds: folds,
        test_fold: args.test_fold.unwrap_or(folds.saturating_sub(1)),
        seed: args.seed.unwrap_or(1),
    };
    fold.validate()?; // config conflicts rejected before any compute
    let patch_size = args.patch.unwrap_or(32);
    let train_config = TrainConfig {
        batch_size: args.batch.unwrap_or(256),
        max_epochs: args.epochs.unwrap_or(100),
        learning_rate: args.lr.unwrap_or(1e-3),
        early_stop_patience: match args.patience {
            Some(0) => None,
            Some(p) => Some(p),
            None => Some(50),
        },
        seed: fold.seed,
        ..TrainConfig::default()
    };
    train_config.validate()?;

    let arch = match &args.arch {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
            ArchConfig::from_config_text(&text)?
        }
        None => ArchConfig::default(),
    };
    let trace = arch.shape_trace()?;
    if arch.input_size != patch_size {
        return Err(CoreError::InvalidArgument(format!(
            "architecture expects {}-cell patches but --patch is {patch_size}",
            arch.input_size
        )));
    }

    let grid = read_ascii_grid_file(&dem_path)?;
    let national_sd = grid_stats(&grid)?.sd;
    if national_sd == 0.0 {
        return Err(CoreError::InvalidArgument(
            "DEM is constant; patch normalization is undefined".into(),
        ));
    }
    let sites = read_sites_csv_file(&sites_path)?;
    let (mut dataset, exclusions) = assemble_dataset(
        &grid,
        national_sd,
        &sites,
        &DatasetConfig {
            patch_size,
            transform,
        },
    )?;
    dataset.assign_folds(fold.k_folds, fold.seed)?;
    println!(
        "assembled {} of {} sites (na {}, off-grid {}, nodata {}, non-positive-log {})",
        exclusions.accepted,
        exclusions.input_sites,
        exclusions.na_target,
        exclusions.off_grid,
        exclusions.nodata_window,
        exclusions.non_positive_log
    );

    let params = build_network(&arch, fold.seed)?;
    println!(
        "training {} parameters (flatten {}) on folds != {}",
        params.parameter_count(),
        trace.flatten_len,
        fold.test_fold
    );
    let output = train(params, &dataset, &fold, &arch, &train_config)?;

    prepare_out_dir(&out, args.force)?;
    write_json(
        &out.join("arch.json"),
        &serde_json::to_value(&arch).map_err(|e| CoreError::Numerical(e.to_string()))?,
    )?;
    save_parameters(&output.params, &arch, out.join("params.bin"))?;
    output.history.write_csv_file(out.join("history.csv"))?;
    save_dataset(&dataset, out.join("dataset"))?;
    let info = RunInfo {
        transform,
        fold,
        national_sd,
        scaling: output.target_scaling,
        patch_size,
        dem_fingerprint: grid.fingerprint(),
        arch_fingerprint: arch.fingerprint(),
        train: train_config.clone(),
        best_epoch: output.history.best_epoch,
        best_holdout_mse: output.history.best_holdout_mse,
        exclusions,
    };
    write_json(
        &out.join("run.json"),
        &serde_json::to_value(&info).map_err(|e| CoreError::Numerical(e.to_string()))?,
    )?;
    write_manifest(
        &out.join("manifest.json"),
        "train",
        BTreeMap::from([
            ("transform".into(), format!("{transform:?}").to_lowercase()),
            ("patch".into(), patch_size.to_string()),
            ("folds".into(), fold.k_folds.to_string()),
            ("test_fold".into(), fold.test_fold.to_string()),
            ("epochs".into(), train_config.max_epochs.to_string()),
            ("batch".into(), train_config.batch_size.to_string()),
            ("lr".into(), train_config.learning_rate.to_string()),
            (
                "patience".into(),
                train_config
                    .early_stop_patience
                    .map_or("none".into(), |p| p.to_string()),
            ),
            ("arch_fingerprint".into(), arch.fingerprint()),
        ]),
        BTreeMap::from([
            (dem_path.display().to_string(), grid.fingerprint()),
            (
                sites_path.display().to_string(),
                file_fingerprint(&sites_path)?,
            ),
        ]),
        fold.seed,
    )?;
    println!(
        "best epoch {} with holdout mse {}",
        output.history.best_epoch, output.history.best_holdout_mse
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let run = load_run(&args.run)?;
    let metrics = evaluate_fold(
        &run.params,
        &run.arch,
        &run.dataset,
        &run.info.fold,
        &run.info.scaling,
    )?;
    let preds = predict_fold(
        &run.params,
        &run.arch,
        &run.dataset,
        &run.info.fold,
        &run.info.scaling,
    )?;
    prepare_out_dir(&args.out, args.force)?;
    write_json(
        &args.out.join("metrics.json"),
        &serde_json::to_value(&metrics).map_err(|e| CoreError::Numerical(e.to_string()))?,
    )?;
    export_scatter_file(
        &preds.predicted,
        &preds.observed,
        args.out.join("scatter.csv"),
    )?;
    write_manifest(
        &args.out.join("manifest.json"),
        "eval",
        BTreeMap::from([("test_fold".into(), run.info.fold.test_fold.to_string())]),
        BTreeMap::from([(
            args.run.join("params.bin").display().to_string(),
            file_fingerprint(&args.run.join("params.bin"))?,
        )]),
        run.info.fold.seed,
    )?;
    println!(
        "held-out fold {}: r_squared = {}, mse = {}, n = {}",
        run.info.fold.test_fold, metrics.r_squared, metrics.mse, metrics.n
    );
    Ok(())
}

fn cmd_map(args: MapArgs) -> CliResult {
    let run = load_run(&args.run)?;
    let grid = read_ascii_grid_file(&args.dem)?;
    let cov = predict_grid(
        &run.params,
        &run.arch,
        &grid,
        run.info.national_sd,
        &run.info.scaling,
        args.stride,
        args.batch,
        &run.info.arch_fingerprint,
    )?;
    prepare_out_dir(&args.out, args.force)?;
    write_ascii_grid_file(&cov.grid, args.out.join("map.asc"))?;
    if args.png {
        render_png(&cov.grid, &ColorRamp::viridis(), args.out.join("map.png"))?;
    }
    write_json(
        &args.out.join("provenance.json"),
        &serde_json::to_value(&cov.provenance).map_err(|e| CoreError::Numerical(e.to_string()))?,
    )?;
    write_manifest(
        &args.out.join("manifest.json"),
        "map",
        BTreeMap::from([
            ("stride".into(), args.stride.to_string()),
            ("batch".into(), args.batch.to_string()),
            ("png".into(), args.png.to_string()),
        ]),
        BTreeMap::from([
            (args.dem.display().to_string(), grid.fingerprint()),
            (
                args.run.join("params.bin").display().to_string(),
                file_fingerprint(&args.run.join("params.bin"))?,
            ),
        ]),
        run.info.fold.seed,
    )?;
    println!(
        "covariate map written to {} (stride {})",
        args.out.join("map.asc").display(),
        args.stride
    );
    Ok(())
}

fn derivative_grids(grid: &Grid, names: &str) -> Result<Vec<(String, Grid)>, CoreError> {
    let mut out = Vec::new();
    for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let g = match name {
            "slope" => slope(grid),
            "tri" => tri(grid),
            "roughness" => roughness(grid),
            "curvature" => curvature(grid),
            other => {
                return Err(CoreError::InvalidArgument(format!(
                    "unknown derivative '{other}' (expected slope, tri, roughness or curvature)"
                )))
            }
        };
        out.push((name.to_string(), g));
    }
    if out.is_empty() {
        return Err(CoreError::InvalidArgument(
            "no derivatives requested".into(),
        ));
    }
    Ok(out)
}

fn cmd_baseline(args: BaselineArgs) -> CliResult {
    let grid = read_ascii_grid_file(&args.dem)?;
    let transform: TargetTransform = args.transform.parse()?;
    let all_sites = read_sites_csv_file(&args.sites)?;
    // same NA / detection-limit / transform path as the network dataset
    let mut sites = Vec::new();
    let mut targets = Vec::new();
    let mut na_target = 0usize;
    let mut non_positive_log = 0usize;
    for site in &all_sites {
        site.validate()?;
        match apply_detection_limit(site) {
            None => na_target += 1,
            Some(v) => match transform_target(v, transform) {
                Ok(t) => {
                    sites.push(site.clone());
                    targets.push(t);
                }
                Err(_) => non_positive_log += 1,
            },
        }
    }
    let derivatives = derivative_grids(&grid, &args.derivatives)?;
    let design = build_design_matrix(&sites, &derivatives)?;
    let z: Vec<f64> = design.site_indices.iter().map(|&i| targets[i]).collect();
    let fit = ols_fit(&design, &z)?;

    prepare_out_dir(&args.out, args.force)?;
    {
        let path = args.out.join("coefficients.csv");
        let f = std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        write_coefficients_csv(&fit, std::io::BufWriter::new(f))
            .map_err(|e| CoreError::io(&path, e))?;
    }
    write_json(
        &args.out.join("metrics.json"),
        &serde_json::json!({
            "r_squared": fit.r_squared,
            "n": z.len(),
            "derivatives": design.columns,
            "excluded": {
                "na_target": na_target,
                "non_positive_log": non_positive_log,
                "off_grid_or_nodata": design.excluded,
            },
        }),
    )?;
    {
        use std::io::Write;
        let path = args.out.join("residuals.csv");
        let mut f = std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        writeln!(f, "easting,northing,residual").map_err(|e| CoreError::io(&path, e))?;
        for (row, &si) in design.site_indices.iter().enumerate() {
            writeln!(
                f,
                "{},{},{}",
                sites[si].easting, sites[si].northing, fit.residuals[row]
            )
            .map_err(|e| CoreError::io(&path, e))?;
        }
    }
    write_manifest(
        &args.out.join("manifest.json"),
        "baseline",
        BTreeMap::from([
            ("derivatives".into(), args.derivatives.clone()),
            ("transform".into(), args.transform.clone()),
        ]),
        BTreeMap::from([
            (args.dem.display().to_string(), grid.fingerprint()),
            (
                args.sites.display().to_string(),
                file_fingerprint(&args.sites)?,
            ),
        ]),
        0,
    )?;
    println!("baseline r_squared = {} on {} sites", fit.r_squared, z.len());
    Ok(())
}

fn cmd_krige(args: KrigeArgs) -> CliResult {
    let run = load_run(&args.run)?;
    let ds = &run.dataset;
    let all: Vec<usize> = (0..ds.len()).collect();
    let predicted = predict_indices(&run.params, &run.arch, ds, &all, &run.info.scaling)?;
    let (res, res_mean) = residuals(&ds.targets, &predicted)?;
    let coords: Vec<(f64, f64)> = ds.sites.iter().map(|s| (s.easting, s.northing)).collect();

    let (min_e, max_e) = coords
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.0), hi.max(c.0))
        });
    let (min_n, max_n) = coords
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.1), hi.max(c.1))
        });
    let diag = ((max_e - min_e).powi(2) + (max_n - min_n).powi(2)).sqrt();
    let max_lag = args.max_lag.unwrap_or(diag / 2.0);
    let bin_width = args.bin_width.unwrap_or(max_lag / 15.0);

    let emp = empirical_variogram(&coords, &res, bin_width, max_lag)?;
    let model = fit_exponential(&emp, None)?;

    prepare_out_dir(&args.out, args.force)?;
    {
        let path = args.out.join("variogram.csv");
        let f = std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        write_variogram_csv(&emp, std::io::BufWriter::new(f))
            .map_err(|e| CoreError::io(&path, e))?;
    }
    write_json(
        &args.out.join("model.json"),
        &serde_json::json!({
            "model": model,
            "residual_mean": res_mean,
            "bin_width": bin_width,
            "max_lag": max_lag,
            "n_sites": coords.len(),
        }),
    )?;
    {
        use std::io::Write;
        let path = args.out.join("residuals.csv");
        let mut f = std::fs::File::create(&path).map_err(|e| CoreError::io(&path, e))?;
        writeln!(f, "easting,northing,residual").map_err(|e| CoreError::io(&path, e))?;
        for (c, r) in coords.iter().zip(res.iter()) {
            writeln!(f, "{},{},{}", c.0, c.1, r).map_err(|e| CoreError::io(&path, e))?;
        }
    }
    let mut inputs = BTreeMap::from([(
        args.run.join("params.bin").display().to_string(),
        file_fingerprint(&args.run.join("params.bin"))?,
    )]);
    if let Some(dem_path) = &args.dem {
        let template = read_ascii_grid_file(dem_path)?;
        let field = krige_residual_grid(&coords, &res, model, &template, args.stride)?;
        write_ascii_grid_file(&field, args.out.join("resid.asc"))?;
        inputs.insert(dem_path.display().to_string(), template.fingerprint());
    }
    write_manifest(
        &args.out.join("manifest.json"),
        "krige",
        BTreeMap::from([
            ("stride".into(), args.stride.to_string()),
            ("bin_width".into(), bin_width.to_string()),
            ("max_lag".into(), max_lag.to_string()),
        ]),
        inputs,
        run.info.fold.seed,
    )?;
    println!(
        "variogram fit: nugget {}, partial sill {}, range {} (residual mean {})",
        model.nugget, model.partial_sill, model.range, res_mean
    );
    Ok(())
}

fn cmd_compose(args: ComposeArgs) -> CliResult {
    let cov = read_ascii_grid_file(&args.cov)?;
    let resid = read_ascii_grid_file(&args.resid)?;
    let z = compose_prediction(&cov, &resid)?;
    prepare_out_dir(&args.out, args.force)?;
    write_ascii_grid_file(&z, args.out.join("z.asc"))?;
    write_manifest(
        &args.out.join("manifest.json"),
        "compose",
        BTreeMap::new(),
        BTreeMap::from([
            (args.cov.display().to_string(), cov.fingerprint()),
            (args.resid.display().to_string(), resid.fingerprint()),
        ]),
        0,
    )?;
    println!("composed prediction written to {}", args.out.join("z.asc").display());
    Ok(())
}
