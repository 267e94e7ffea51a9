//! Bundled example data and model scripts.
//!
//! The political democracy fixture carries the eight democracy indicators
//! (four expert ratings each for 1960 and 1965) of the 75 developing
//! countries in Bollen's (1989) industrialization and political democracy
//! study. The rows here are a moment-matched reconstruction, not the
//! original survey records: they are synthesized (fixed seed, orthogonal
//! construction) to carry exactly the published n = 75 sample means and
//! covariance matrix of y1..y8. Every statistic this crate computes depends
//! on the data only through those moments, so fits on this file agree with
//! fits on the original data.

use crate::dataset::Dataset;
use crate::error::Result;

/// Moment-matched political democracy indicators, 75 rows, columns y1..y8.
pub const POLITICAL_DEMOCRACY_CSV: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/political_democracy.csv"));

/// Two-factor CFA with no error covariances (model-building stage 1).
pub const POLDEM_MODEL_BASE: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/models/poldem_stage1.model"));

/// Stage 2 for the y2 loading: frees the y2-y4 error covariance.
pub const POLDEM_MODEL_L2_STAGE2: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../fixtures/models/poldem_lambda2_stage2.model"
));

/// Stage 3 for the y2 loading: frees y2-y4 and y2-y6.
pub const POLDEM_MODEL_L2_STAGE3: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../fixtures/models/poldem_lambda2_stage3.model"
));

/// Stage 2 for the y6 loading: frees the y2-y6 error covariance.
pub const POLDEM_MODEL_L6_STAGE2: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../fixtures/models/poldem_lambda6_stage2.model"
));

/// Stage 3 for the y6 loading: frees y2-y6 and y6-y8.
pub const POLDEM_MODEL_L6_STAGE3: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../fixtures/models/poldem_lambda6_stage3.model"
));

/// Parse the bundled political democracy CSV into a [`Dataset`].
pub fn political_democracy() -> Result<Dataset> {
    use nalgebra::DMatrix;
    let mut lines = POLITICAL_DEMOCRACY_CSV.lines();
    let names: Vec<String> = lines
        .next()
        .expect("bundled CSV has a header")
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        for field in line.split(',') {
            values.push(field.parse::<f64>().expect("bundled CSV is numeric"));
        }
        rows += 1;
    }
    Dataset::new(names.clone(), DMatrix::from_row_slice(rows, names.len(), &values))
}
