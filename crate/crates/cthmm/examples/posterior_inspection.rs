//! Forward-backward on a single hand-written timeline: state marginals,
//! pairwise endpoint posteriors, and the log-likelihood.
//!
//! Run: `cargo run --release --example posterior_inspection`

use cthmm::forward_backward;
use cthmm::model::{EventCode, Observation, PatientTimeline};
use cthmm::presets;

fn main() -> cthmm::Result<()> {
    let params = presets::demo_parameters();
    let timeline = PatientTimeline::new(
        "example",
        vec![
            Observation { time: 0.0, event: EventCode::Gp },
            Observation { time: 0.4, event: EventCode::Gp },
            Observation { time: 0.9, event: EventCode::Ed },
            Observation { time: 1.0, event: EventCode::Hosp },
            Observation { time: 2.6, event: EventCode::Gp },
        ],
    )?;

    let posterior = forward_backward(&timeline, &params)?;
    println!("log-likelihood: {:.4}", posterior.log_likelihood);

    println!("\nstate marginals (gamma):");
    for (t, obs) in timeline.observations().iter().enumerate() {
        println!(
            "  t={:.1} {:4} -> ({:.3}, {:.3}, {:.3})",
            obs.time,
            obs.event.label(),
            posterior.gamma[[t, 0]],
            posterior.gamma[[t, 1]],
            posterior.gamma[[t, 2]]
        );
    }

    println!("\nendpoint-pair posterior for the interval around the ED visit:");
    let xi = &posterior.xi[1]; // between t=0.4 and t=0.9
    for a in 0..3 {
        println!(
            "  from state {}: {:.3} {:.3} {:.3}",
            a + 1,
            xi[[a, 0]],
            xi[[a, 1]],
            xi[[a, 2]]
        );
    }
    let total: f64 = xi.iter().sum();
    println!("  (sums to {total:.12})");
    Ok(())
}
