//! State-occupancy curves exp(Q t): the probability of being in each state at
//! time t for each starting state, plus the five-year transition matrix.
//!
//! Run: `cargo run --release --example occupancy_curves`

use cthmm::inference::state_occupancy;
use cthmm::io::transition_summary;
use cthmm::presets;

fn main() -> cthmm::Result<()> {
    let q = presets::demo_generator();
    let table = state_occupancy(&q, 15.0, 1.0)?;

    println!("occupancy by time (rows: years; probability of state 1/2/3):");
    for start in 0..3 {
        println!("  starting in state {}:", start + 1);
        for (t, matrix) in table.times.iter().zip(&table.matrices) {
            println!(
                "    t={t:>4}: {:.3} {:.3} {:.3}",
                matrix[[start, 0]],
                matrix[[start, 1]],
                matrix[[start, 2]]
            );
        }
    }

    print!("\n{}", transition_summary(&q, 5.0)?);
    Ok(())
}
