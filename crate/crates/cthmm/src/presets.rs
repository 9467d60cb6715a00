//! Bundled three-state reference parameters used by the examples, the
//! simulator demos, and the recovery tests.

use ndarray::{arr1, arr2, Array1};

use crate::emission::log_odds_to_beta;
use crate::model::{EmissionCoefficients, GeneratorMatrix, ModelParameters, N_EVENTS};

/// Reference emission probabilities per state, rows indexed by the previous
/// event (GP, ED, Hosp, Spec) and columns by the outcome (GP, ED, Hosp, Spec).
/// Rounded to two decimals, the way such tables are usually reported; rows may
/// therefore sum to 0.99 or 1.01.
pub const DEMO_EMISSION_CELLS: [[[f64; N_EVENTS]; N_EVENTS]; 3] = [
    [
        [0.89, 0.07, 0.02, 0.01],
        [0.50, 0.32, 0.17, 0.01],
        [0.71, 0.15, 0.12, 0.02],
        [0.78, 0.05, 0.10, 0.07],
    ],
    [
        [0.53, 0.09, 0.04, 0.34],
        [0.30, 0.32, 0.20, 0.18],
        [0.44, 0.16, 0.11, 0.29],
        [0.55, 0.07, 0.04, 0.35],
    ],
    [
        [0.33, 0.40, 0.18, 0.09],
        [0.11, 0.57, 0.26, 0.06],
        [0.20, 0.48, 0.17, 0.15],
        [0.08, 0.19, 0.07, 0.65],
    ],
];

/// The reference emission tables with each row rebalanced to sum exactly to
/// one. The correction spreads a row's two-decimal rounding deficit evenly
/// over its four cells (at most 0.0025 each), so every adjusted value still
/// rounds back to the tabulated cell.
pub fn demo_emission_tables() -> [[[f64; N_EVENTS]; N_EVENTS]; 3] {
    let mut tables = DEMO_EMISSION_CELLS;
    for table in &mut tables {
        for row in table.iter_mut() {
            let deficit = 1.0 - row.iter().sum::<f64>();
            let shift = deficit / N_EVENTS as f64;
            for cell in row.iter_mut() {
                *cell += shift;
            }
        }
    }
    tables
}

/// Reference generator: slow departure from the mildest state, faster recovery
/// from the more acute ones.
pub fn demo_generator() -> GeneratorMatrix {
    GeneratorMatrix::from_off_diagonal(arr2(&[
        [0.0, 0.08, 0.03],
        [0.40, 0.0, 0.10],
        [0.25, 0.15, 0.0],
    ]))
    .expect("reference rates are valid")
}

/// Reference initial state distribution.
pub fn demo_initial_distribution() -> Array1<f64> {
    arr1(&[0.6, 0.3, 0.1])
}

/// The full reference parameter set, with emission coefficients obtained by
/// log-odds inversion of [`demo_emission_tables`].
pub fn demo_parameters() -> ModelParameters {
    let beta = EmissionCoefficients::from_matrices(
        demo_emission_tables()
            .iter()
            .map(|table| log_odds_to_beta(table).expect("reference table is strictly positive"))
            .collect(),
    )
    .expect("reference coefficients are finite");
    ModelParameters::new(demo_initial_distribution(), demo_generator(), beta)
        .expect("reference parameters are valid")
}
