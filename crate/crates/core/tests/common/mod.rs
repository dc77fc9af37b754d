use std::path::PathBuf;

use qlbs_core::basis::{feature_matrix, make_spec, FeatureMatrix};
use qlbs_core::market_sim::{load_paths, PathSet};

pub fn table3_paths() -> PathSet {
    let file = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/table3_paths.csv");
    load_paths(&file, None).unwrap()
}

/// Three quadratic splines over the observed price range, rounded to two
/// decimals like the printed feature matrix.
pub fn rounded_features(paths: &PathSet) -> Vec<FeatureMatrix> {
    let (lo, hi) = paths
        .prices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let spec = make_spec(lo, hi, 3, 3).unwrap();
    (0..=paths.n_steps())
        .map(|t| FeatureMatrix {
            values: feature_matrix(&spec, paths.prices.column(t))
                .values
                .mapv(|v| (v * 100.0).round() / 100.0),
        })
        .collect()
}
