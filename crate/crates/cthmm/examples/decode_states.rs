//! Decode simulated timelines at the true parameters and measure how often the
//! most probable posterior state matches the hidden truth.
//!
//! Run: `cargo run --release --example decode_states`

use cthmm::inference::decode;
use cthmm::presets;
use cthmm::simulate::{sample_cohort, SimConfig};

fn main() -> cthmm::Result<()> {
    let params = presets::demo_parameters();
    let cohort = sample_cohort(&SimConfig {
        params: params.clone(),
        n_patients: 300,
        observation_rate: 3.0,
        horizon_years: 5.0,
        rng_seed: 21,
        include_t0_observation: true,
    })?;

    let mut correct = 0usize;
    let mut total = 0usize;
    for patient in &cohort {
        let decoded = decode(&patient.timeline, &params)?;
        for point in &decoded.points {
            if point.state == patient.trajectory.state_at(point.time) {
                correct += 1;
            }
            total += 1;
        }
    }
    let accuracy = correct as f64 / total as f64;
    println!(
        "posterior-marginal decoding accuracy at true parameters: {:.1}% over {total} \
         observations (chance 33.3%)",
        100.0 * accuracy
    );

    println!("\none decoded timeline:");
    let patient = &cohort[0];
    let decoded = decode(&patient.timeline, &params)?;
    println!("  time   event  gamma                    decoded  true");
    for point in decoded.points.iter().take(12) {
        println!(
            "  {:5.2}  {:5}  ({:.2}, {:.2}, {:.2})  {}        {}",
            point.time,
            point.event.label(),
            point.gamma[0],
            point.gamma[1],
            point.gamma[2],
            point.state + 1,
            patient.trajectory.state_at(point.time) + 1
        );
    }
    Ok(())
}
