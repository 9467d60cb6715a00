//! Turn a probability table into emission coefficients by log-odds inversion
//! and render the table report, at two decimals and at full precision.
//!
//! Run: `cargo run --release --example emission_tables`

use cthmm::emission::{covariates_for_pattern, emission_probs, log_odds_to_beta};
use cthmm::io::emission_table_csv;
use cthmm::model::EventCode;
use cthmm::presets;

fn main() -> cthmm::Result<()> {
    let tables = presets::demo_emission_tables();
    let beta = log_odds_to_beta(&tables[2])?;

    println!("state-3 coefficient block from the probability table:");
    for (k, outcome) in [EventCode::Ed, EventCode::Hosp, EventCode::Spec]
        .iter()
        .enumerate()
    {
        println!(
            "  {outcome:4} | intercept {:+.3}, prev ED {:+.3}, prev Hosp {:+.3}, prev Spec {:+.3}",
            beta[[k, 0]],
            beta[[k, 1]],
            beta[[k, 2]],
            beta[[k, 3]]
        );
    }

    // The inversion is exact: probabilities come back to machine precision.
    let mut worst = 0.0f64;
    for (pattern, row) in tables[2].iter().enumerate() {
        let probs = emission_probs(&beta, &covariates_for_pattern(pattern));
        for k in 0..4 {
            worst = worst.max((probs[k] - row[k]).abs());
        }
    }
    println!("round-trip error: {worst:.2e}");

    println!("\nemission report (two decimals):");
    print!("{}", emission_table_csv(&presets::demo_parameters(), false));
    Ok(())
}
