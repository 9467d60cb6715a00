//! Fit the model by EM on a simulated cohort and compare the recovered
//! emission probabilities and transition rates with the generating truth.
//!
//! States are reported in canonical order (sorted by acute-care probability).
//! Two of the reference states have nearly tied scores, so at small sample
//! sizes the canonical order can transpose them; the comparison below first
//! matches fitted states to true states by emission agreement.
//!
//! Run: `cargo run --release --example fit_em`

use cthmm::emission::{covariates_for_pattern, emission_probs};
use cthmm::estimation::{em_fit, FitConfig};
use cthmm::model::{permute_states, EventCode, ModelParameters, PatientTimeline};
use cthmm::presets;
use cthmm::simulate::{sample_cohort, SimConfig};

/// Total absolute emission difference between fitted state `s` and true state
/// `t` over all previous-event patterns.
fn state_distance(fitted: &ModelParameters, truth: &ModelParameters, s: usize, t: usize) -> f64 {
    let mut total = 0.0;
    for pattern in 0..4 {
        let x = covariates_for_pattern(pattern);
        let a = emission_probs(fitted.beta.for_state(s), &x);
        let b = emission_probs(truth.beta.for_state(t), &x);
        for k in 0..4 {
            total += (a[k] - b[k]).abs();
        }
    }
    total
}

fn main() -> cthmm::Result<()> {
    let truth = presets::demo_parameters();
    let cohort = sample_cohort(&SimConfig {
        params: truth.clone(),
        n_patients: 600,
        observation_rate: 3.0,
        horizon_years: 5.0,
        rng_seed: 3,
        include_t0_observation: true,
    })?;
    let timelines: Vec<PatientTimeline> = cohort.into_iter().map(|p| p.timeline).collect();

    let config = FitConfig {
        restarts: 4,
        convergence_threshold: 0.05,
        rng_seed: 5,
        ..FitConfig::default()
    };
    let start = std::time::Instant::now();
    let fit = em_fit(&timelines, &config)?;
    println!(
        "converged: {} in {} iterations ({:?}), final log-likelihood {:.2}",
        fit.converged,
        fit.n_iterations,
        start.elapsed(),
        fit.log_likelihood_trace.last().unwrap()
    );

    // Match fitted states to true states by total emission agreement.
    let perms: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let best = perms
        .iter()
        .min_by(|a, b| {
            let cost = |perm: &[usize; 3]| -> f64 {
                (0..3).map(|t| state_distance(&fit.params, &truth, perm[t], t)).sum()
            };
            cost(a).total_cmp(&cost(b))
        })
        .unwrap();
    let matched = permute_states(&fit.params, best);
    if *best != [0, 1, 2] {
        println!("(canonical order transposed near-tied states; comparing after matching)");
    }

    println!("\ngenerator rates (fitted vs true):");
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                println!(
                    "  q[{} -> {}]: {:.3} vs {:.3}",
                    i + 1,
                    j + 1,
                    matched.q.rate(i, j),
                    truth.q.rate(i, j)
                );
            }
        }
    }

    println!("\nemission probabilities with previous event = GP (fitted vs true):");
    let x = covariates_for_pattern(0);
    for state in 0..3 {
        let fitted = emission_probs(matched.beta.for_state(state), &x);
        let expected = emission_probs(truth.beta.for_state(state), &x);
        print!("  state {}:", state + 1);
        for e in EventCode::ALL {
            print!(" {}={:.2}({:.2})", e, fitted[e.index()], expected[e.index()]);
        }
        println!();
    }
    Ok(())
}
