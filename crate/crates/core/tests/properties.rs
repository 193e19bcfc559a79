//! Property-based invariants across the pipeline's data plumbing:
//! round trips, partitions, normalization and metric identities.

use proptest::prelude::*;

use terratex_core::dataset::{
    normalize_patch, read_sites_csv, split_folds, write_sites_csv, Site,
};
use terratex_core::evaluation::{mse, r_squared};
use terratex_core::geostat::empirical_variogram;
use terratex_core::raster::{
    block_aggregate, grid_stats, read_ascii_grid, write_ascii_grid, Grid,
};

fn arb_grid() -> impl Strategy<Value = Grid> {
    (2usize..8, 2usize..8).prop_flat_map(|(rows, cols)| {
        (
            proptest::collection::vec(
                prop_oneof![
                    8 => -1e6f64..1e6,
                    1 => Just(-9999.0), // NODATA
                ],
                rows * cols,
            ),
            0.1f64..1000.0,
            -1e5f64..1e5,
            -1e5f64..1e5,
        )
            .prop_map(move |(cells, cell_size, oe, on)| {
                Grid::new(rows, cols, cell_size, oe, on, -9999.0, cells).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ascii_grid_round_trip_is_bit_exact(grid in arb_grid()) {
        let mut buf = Vec::new();
        write_ascii_grid(&grid, &mut buf).unwrap();
        let back = read_ascii_grid(std::io::Cursor::new(&buf)).unwrap();
        prop_assert_eq!(grid.n_rows(), back.n_rows());
        prop_assert_eq!(grid.n_cols(), back.n_cols());
        prop_assert_eq!(grid.cell_size().to_bits(), back.cell_size().to_bits());
        for (a, b) in grid.cells().iter().zip(back.cells().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fingerprint_detects_any_cell_change(grid in arb_grid(), delta in 1.0f64..10.0) {
        let base = grid.fingerprint();
        let mut changed = grid.clone();
        let v = changed.value(0, 0);
        changed.set(0, 0, if changed.is_nodata(v) { 1.0 } else { v + delta });
        prop_assert_ne!(base, changed.fingerprint());
    }

    #[test]
    fn block_aggregate_preserves_value_range(grid in arb_grid(), factor in 1usize..4) {
        prop_assume!(grid.n_rows() >= factor && grid.n_cols() >= factor);
        let agg = block_aggregate(&grid, factor).unwrap();
        let valid: Vec<f64> = grid.cells().iter().copied()
            .filter(|&v| !grid.is_nodata(v)).collect();
        prop_assume!(!valid.is_empty());
        let (lo, hi) = valid.iter().fold((f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), &v| (lo.min(v), hi.max(v)));
        for &v in agg.cells() {
            if !agg.is_nodata(v) {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn fold_labels_partition_evenly(n in 2usize..400, k in 2u32..12, seed in any::<u64>()) {
        prop_assume!(n >= k as usize);
        let labels = split_folds(n, k, seed).unwrap();
        prop_assert_eq!(labels.len(), n);
        let mut counts = vec![0usize; k as usize];
        for &l in &labels {
            prop_assert!(l < k);
            counts[l as usize] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(max - min <= 1, "fold sizes {:?}", counts);
        // deterministic per seed
        prop_assert_eq!(labels, split_folds(n, k, seed).unwrap());
    }

    #[test]
    fn normalization_is_shift_invariant(
        raw in proptest::collection::vec(-1e5f64..1e5, 9),
        shift in -1e4f64..1e4,
        sd in 0.1f64..100.0,
    ) {
        // integer-rounded values so the shift is exact in f64
        let raw: Vec<f64> = raw.iter().map(|v| v.round()).collect();
        let shift = shift.round();
        let shifted: Vec<f64> = raw.iter().map(|&v| v + shift).collect();
        let a = normalize_patch(&raw, 3, sd, 0.0, 0.0).unwrap();
        let b = normalize_patch(&shifted, 3, sd, 0.0, 0.0).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        prop_assert_eq!(a.values[4], 0.0); // center exactly zero
    }

    #[test]
    fn r_squared_never_exceeds_one(
        obs in proptest::collection::vec(-100.0f64..100.0, 3..40),
        noise in proptest::collection::vec(-50.0f64..50.0, 3..40),
    ) {
        let n = obs.len().min(noise.len());
        let obs = &obs[..n];
        let pred: Vec<f64> = obs.iter().zip(noise.iter()).map(|(&o, &e)| o + e).collect();
        if let Ok(r2) = r_squared(&pred, obs) {
            prop_assert!(r2 <= 1.0 + 1e-12);
        }
        prop_assert!(mse(&pred, obs).unwrap() >= 0.0);
    }

    #[test]
    fn variogram_invariant_under_negation_and_shift(
        coords in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 3..30),
        values in proptest::collection::vec(-5.0f64..5.0, 3..30),
        shift in -10.0f64..10.0,
    ) {
        let n = coords.len().min(values.len());
        let coords = &coords[..n];
        let values = &values[..n];
        let base = empirical_variogram(coords, values, 5.0, 40.0).unwrap();
        let negated: Vec<f64> = values.iter().map(|v| -v).collect();
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let neg = empirical_variogram(coords, &negated, 5.0, 40.0).unwrap();
        let shf = empirical_variogram(coords, &shifted, 5.0, 40.0).unwrap();
        prop_assert_eq!(&base.pair_counts, &neg.pair_counts);
        for i in 0..base.semivariance.len() {
            prop_assert_eq!(base.semivariance[i].to_bits(), neg.semivariance[i].to_bits());
            prop_assert!((base.semivariance[i] - shf.semivariance[i]).abs()
                <= 1e-9 * (1.0 + base.semivariance[i].abs()));
        }
    }

    #[test]
    fn sites_csv_round_trip(
        records in proptest::collection::vec(
            (-1e5f64..1e5, -1e5f64..1e5, proptest::option::of(0.001f64..1e4),
             any::<bool>(), 0.001f64..10.0),
            1..20,
        )
    ) {
        let sites: Vec<Site> = records.iter().map(|&(e, n, v, below, lod)| Site {
            easting: e,
            northing: n,
            raw_value: v,
            below_detection: below,
            lower_detection_limit: lod,
        }).collect();
        let mut buf = Vec::new();
        write_sites_csv(&sites, &mut buf).unwrap();
        let back = read_sites_csv(std::io::Cursor::new(&buf)).unwrap();
        prop_assert_eq!(back, sites);
    }

    #[test]
    fn grid_stats_sd_nonnegative_and_mean_bounded(grid in arb_grid()) {
        if let Ok(stats) = grid_stats(&grid) {
            let valid: Vec<f64> = grid.cells().iter().copied()
                .filter(|&v| !grid.is_nodata(v)).collect();
            let (lo, hi) = valid.iter().fold((f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &v| (lo.min(v), hi.max(v)));
            prop_assert!(stats.sd >= 0.0);
            prop_assert!(stats.mean >= lo - 1e-9 && stats.mean <= hi + 1e-9);
            prop_assert_eq!(stats.valid_count, valid.len());
        }
    }
}
