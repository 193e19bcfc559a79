//! Terrain-texture covariate learning at desk scale.
//!
//! The pipeline: read a gridded elevation model, extract normalized terrain
//! patches around sample sites, train a small convolutional regression network
//! on them, slide the trained network over the grid to produce a covariate map,
//! and model the residual spatial structure with a variogram and ordinary
//! kriging so that predictions decompose as `covariate + kriged residual`.

pub mod autograd;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geostat;
pub mod mapgen;
pub mod network;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::CoreError;
pub use raster::{Grid, GridStats};

/// Crate version, echoed into run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// On-disk format version shared by the parameter file, dataset directory
/// and sidecar manifests.
pub const FORMAT_VERSION: u32 = 1;
