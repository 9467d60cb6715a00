//! Acceptance suite: one test per release criterion. Each test prints a PASS
//! line with its measured margin (visible with `--nocapture`); tolerances are
//! asserted, so a red test is a failed criterion.

#![allow(clippy::needless_range_loop)] // indexed loops read better for small matrices

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use cthmm::emission::{covariates_for_pattern, emission_probs};
use cthmm::estimation::{accumulate_q_stats, em_fit, initialize, FitConfig, FitResult};
use cthmm::inference::{cohort_e_step, emission_matrix, forward_backward, state_occupancy};
use cthmm::io::emission_table_csv;
use cthmm::matexp::{matrix_exp, transition_kernel, van_loan_integral};
use cthmm::model::{
    EmissionCoefficients, EventCode, GeneratorMatrix, ModelParameters, Observation,
    PatientTimeline, N_COVARIATES, N_LOGITS,
};
use cthmm::presets;
use cthmm::simulate::{sample_cohort, SimConfig};

fn random_generator(n: usize, rng: &mut impl Rng) -> GeneratorMatrix {
    let mut off = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off[[i, j]] = rng.random::<f64>();
            }
        }
    }
    GeneratorMatrix::from_off_diagonal(off).unwrap()
}

fn random_params(n: usize, rng: &mut impl Rng) -> ModelParameters {
    let mut pi = Array1::from_shape_fn(n, |_| rng.random::<f64>() + 0.05);
    let total = pi.sum();
    pi.mapv_inplace(|v| v / total);
    let beta = EmissionCoefficients::from_matrices(
        (0..n)
            .map(|_| Array2::from_shape_fn((N_LOGITS, N_COVARIATES), |_| rng.sample(StandardNormal)))
            .collect(),
    )
    .unwrap();
    ModelParameters::new(pi, random_generator(n, rng), beta).unwrap()
}

fn random_timeline(len: usize, rng: &mut impl Rng) -> PatientTimeline {
    let mut t = 0.0;
    let obs = (0..len)
        .map(|_| {
            let o = Observation {
                time: t,
                event: EventCode::ALL[rng.random_range(0..4)],
            };
            t += 0.02 + 1.5 * rng.random::<f64>();
            o
        })
        .collect();
    PatientTimeline::new("acc", obs).unwrap()
}

/// Exhaustive hidden-path enumeration of the likelihood.
fn brute_force_log_likelihood(timeline: &PatientTimeline, params: &ModelParameters) -> f64 {
    let n = params.n_states();
    let t_len = timeline.n_observations();
    let b = emission_matrix(timeline, &params.beta);
    let kernels: Vec<Array2<f64>> = timeline
        .intervals()
        .map(|dt| transition_kernel(&params.q, dt).unwrap().probs().clone())
        .collect();
    let mut total = 0.0;
    for code in 0..n.pow(t_len as u32) {
        let mut rest = code;
        let mut prev = usize::MAX;
        let mut p = 1.0;
        for t in 0..t_len {
            let state = rest % n;
            rest /= n;
            p *= if t == 0 {
                params.pi[state]
            } else {
                kernels[t - 1][[prev, state]]
            } * b[[t, state]];
            prev = state;
        }
        total += p;
    }
    total.ln()
}

fn demo_cohort(n_patients: usize, seed: u64) -> Vec<PatientTimeline> {
    let cohort = sample_cohort(&SimConfig {
        params: presets::demo_parameters(),
        n_patients,
        observation_rate: 3.0,
        horizon_years: 5.0,
        rng_seed: seed,
        include_t0_observation: true,
    })
    .unwrap();
    cohort.into_iter().map(|p| p.timeline).collect()
}

#[test]
fn c01_likelihood_matches_exhaustive_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let params = random_params(3, &mut rng);
        let len = rng.random_range(1..=8);
        let timeline = random_timeline(len, &mut rng);
        let fb = forward_backward(&timeline, &params).unwrap();
        let brute = brute_force_log_likelihood(&timeline, &params);
        let err = (fb.log_likelihood - brute).abs();
        worst = worst.max(err);
        assert!(err <= 1e-8, "length {len}: {} vs {brute}", fb.log_likelihood);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!("PASS c01 likelihood oracle equivalence: worst abs error {worst:.3e} in {elapsed:?}");
}

#[test]
fn c02_pairwise_posteriors_normalize_and_marginalize() {
    let mut rng = ChaCha12Rng::seed_from_u64(102);
    let mut n_intervals = 0usize;
    let mut worst_sum = 0.0f64;
    let mut worst_marginal = 0.0f64;
    while n_intervals < 10_000 {
        let params = random_params(3, &mut rng);
        for _ in 0..5 {
            let timeline = random_timeline(21, &mut rng);
            let post = forward_backward(&timeline, &params).unwrap();
            for (t, xi) in post.xi.iter().enumerate() {
                let total: f64 = xi.iter().sum();
                worst_sum = worst_sum.max((total - 1.0).abs());
                assert!((total - 1.0).abs() <= 1e-10, "xi sums to {total}");
                assert!(xi.iter().all(|&v| v >= 0.0));
                for a in 0..3 {
                    let row: f64 = (0..3).map(|b| xi[[a, b]]).sum();
                    let err = (row - post.gamma[[t, a]]).abs();
                    worst_marginal = worst_marginal.max(err);
                    assert!(err <= 1e-9);
                }
                for b in 0..3 {
                    let col: f64 = (0..3).map(|a| xi[[a, b]]).sum();
                    let err = (col - post.gamma[[t + 1, b]]).abs();
                    worst_marginal = worst_marginal.max(err);
                    assert!(err <= 1e-9);
                }
                n_intervals += 1;
            }
        }
    }
    println!(
        "PASS c02 pairwise posterior normalization: {n_intervals} intervals, worst sum \
         deviation {worst_sum:.3e}, worst marginalization error {worst_marginal:.3e}"
    );
}

#[test]
fn c03_kernels_are_stochastic_and_form_a_semigroup() {
    let mut rng = ChaCha12Rng::seed_from_u64(103);
    let mut worst_row = 0.0f64;
    let mut worst_semigroup = 0.0f64;
    for _ in 0..100 {
        let q = random_generator(3, &mut rng);
        for dt in [1e-4, 0.1, 1.0, 5.0, 25.0] {
            let p = transition_kernel(&q, dt).unwrap();
            for i in 0..3 {
                let sum: f64 = (0..3).map(|j| p.prob(i, j)).sum();
                worst_row = worst_row.max((sum - 1.0).abs());
                assert!((sum - 1.0).abs() <= 1e-9);
                assert!((0..3).all(|j| p.prob(i, j) >= 0.0));
            }
        }
        let s = 0.2 + 2.0 * rng.random::<f64>();
        let t = 0.2 + 2.0 * rng.random::<f64>();
        let whole = matrix_exp(&(q.rates() * (s + t))).unwrap();
        let split = matrix_exp(&(q.rates() * s))
            .unwrap()
            .dot(&matrix_exp(&(q.rates() * t)).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let err = (whole[[i, j]] - split[[i, j]]).abs();
                worst_semigroup = worst_semigroup.max(err);
                assert!(err <= 1e-9, "semigroup error {err} at s={s}, t={t}");
            }
        }
    }
    println!(
        "PASS c03 kernel stochasticity: worst row-sum deviation {worst_row:.3e}, worst \
         semigroup error {worst_semigroup:.3e}"
    );
}

#[test]
fn c04_expected_sojourn_times_partition_the_interval() {
    let mut rng = ChaCha12Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = random_generator(3, &mut rng);
        for t_end in [0.1, 1.0, 5.0] {
            let kernel = transition_kernel(&q, t_end).unwrap();
            let diag: Vec<Array2<f64>> = (0..3)
                .map(|k| van_loan_integral(&q, t_end, k, k).unwrap().matrix().clone())
                .collect();
            for a in 0..3 {
                for b in 0..3 {
                    let total: f64 = (0..3).map(|k| diag[k][[a, b]]).sum::<f64>()
                        / kernel.prob(a, b);
                    let err = (total - t_end).abs();
                    worst = worst.max(err);
                    assert!(err <= 1e-8, "T={t_end} endpoints ({a},{b}): {total}");
                }
            }
        }
    }

    // Exposure identity across a full E-step sweep.
    let timelines = demo_cohort(150, 104);
    let params = presets::demo_parameters();
    let (posteriors, _) = cohort_e_step(&timelines, &params).unwrap();
    let stats = accumulate_q_stats(&posteriors, &timelines, &params.q).unwrap();
    let exposure: f64 = timelines.iter().flat_map(|tl| tl.intervals()).sum();
    let rel = (stats.total_sojourn() - exposure).abs() / exposure;
    assert!(rel <= 1e-6, "relative exposure error {rel}");
    println!(
        "PASS c04 sojourn-time identity: worst endpoint deviation {worst:.3e}, cohort \
         exposure relative error {rel:.3e}"
    );
}

#[test]
fn c05_endpoint_conditioned_expectations_match_monte_carlo() {
    let start = Instant::now();
    let q = GeneratorMatrix::from_off_diagonal(ndarray::arr2(&[[0.0, 1.0], [0.5, 0.0]])).unwrap();
    let t_end = 1.0;
    let accepted_target = 200_000usize;
    let mut rng = ChaCha12Rng::seed_from_u64(105);

    // One path: returns (end state, per-state sojourn, jump counts).
    let mut sample_path = |start_state: usize| -> (usize, [f64; 2], [[f64; 2]; 2]) {
        let mut state = start_state;
        let mut t = 0.0;
        let mut sojourn = [0.0; 2];
        let mut jumps = [[0.0; 2]; 2];
        loop {
            let exit = q.exit_rate(state);
            let hold = -rng.random::<f64>().ln() / exit;
            if t + hold >= t_end {
                sojourn[state] += t_end - t;
                return (state, sojourn, jumps);
            }
            sojourn[state] += hold;
            t += hold;
            let next = 1 - state; // two states: the only other one
            jumps[state][next] += 1.0;
            state = next;
        }
    };

    let kernel = transition_kernel(&q, t_end).unwrap();
    let integrals: Vec<Vec<Array2<f64>>> = (0..2)
        .map(|k| {
            (0..2)
                .map(|l| van_loan_integral(&q, t_end, k, l).unwrap().matrix().clone())
                .collect()
        })
        .collect();

    let mut worst_sigma = 0.0f64;
    for a in 0..2 {
        // sums[b][stat] and sums of squares, stats = R_0, R_1, N_01, N_10.
        let mut counts = [0usize; 2];
        let mut sums = [[0.0f64; 4]; 2];
        let mut sq_sums = [[0.0f64; 4]; 2];
        while counts[0] < accepted_target || counts[1] < accepted_target {
            let (b, sojourn, jumps) = sample_path(a);
            if counts[b] >= accepted_target {
                continue;
            }
            counts[b] += 1;
            let stats = [sojourn[0], sojourn[1], jumps[0][1], jumps[1][0]];
            for (i, s) in stats.iter().enumerate() {
                sums[b][i] += s;
                sq_sums[b][i] += s * s;
            }
        }
        for b in 0..2 {
            let m = accepted_target as f64;
            let expected = [
                integrals[0][0][[a, b]] / kernel.prob(a, b),
                integrals[1][1][[a, b]] / kernel.prob(a, b),
                q.rate(0, 1) * integrals[0][1][[a, b]] / kernel.prob(a, b),
                q.rate(1, 0) * integrals[1][0][[a, b]] / kernel.prob(a, b),
            ];
            let labels = ["R_1", "R_2", "N_12", "N_21"];
            for i in 0..4 {
                let mean = sums[b][i] / m;
                let var = (sq_sums[b][i] - sums[b][i] * sums[b][i] / m) / (m - 1.0);
                let se = (var / m).sqrt().max(1e-12);
                let sigmas = (mean - expected[i]).abs() / se;
                worst_sigma = worst_sigma.max(sigmas);
                assert!(
                    sigmas <= 3.0,
                    "endpoints ({a},{b}) {}: MC {mean:.5} vs {:.5} ({sigmas:.2} SE)",
                    labels[i],
                    expected[i]
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "PASS c05 endpoint-conditioned expectations vs Monte Carlo: worst deviation \
         {worst_sigma:.2} SE in {elapsed:?}"
    );
}

#[test]
fn c06_em_log_likelihood_never_decreases() {
    let timelines = demo_cohort(500, 106);
    let config = FitConfig {
        n_states: 3,
        convergence_threshold: 1e-12, // force the full 50 iterations
        max_outer_iterations: 50,
        restarts: 1,
        rng_seed: 106,
        ..FitConfig::default()
    };
    let fit = em_fit(&timelines, &config).unwrap();
    assert_eq!(fit.n_iterations, 50);
    let trace = &fit.log_likelihood_trace;
    let mut worst_drop = 0.0f64;
    for step in trace.windows(2) {
        worst_drop = worst_drop.max(step[0] - step[1]);
        assert!(
            step[1] >= step[0] - 1e-7,
            "log-likelihood fell from {} to {}",
            step[0],
            step[1]
        );
    }
    println!(
        "PASS c06 EM monotonicity: {} trace points, worst decrease {worst_drop:.3e}",
        trace.len()
    );
}

struct Recovery {
    fit: FitResult,
    elapsed: Duration,
}

/// Recovery cohort: the reference emission tables and generator, a uniform
/// start distribution (maximizes early occupancy of every state), 3 visits
/// per year over 5 years.
fn recovery_cohort(n_patients: usize, seed: u64) -> Vec<PatientTimeline> {
    let mut params = presets::demo_parameters();
    params.pi = Array1::from_elem(3, 1.0 / 3.0);
    let cohort = sample_cohort(&SimConfig {
        params,
        n_patients,
        observation_rate: 3.0,
        horizon_years: 5.0,
        rng_seed: seed,
        include_t0_observation: true,
    })
    .unwrap();
    cohort.into_iter().map(|p| p.timeline).collect()
}

fn recovery_fit(n_patients: usize, cohort_seed: u64, fit_seed: u64) -> Recovery {
    let timelines = recovery_cohort(n_patients, cohort_seed);
    let config = FitConfig {
        n_states: 3,
        convergence_threshold: 0.05,
        max_outer_iterations: 500,
        inner_q_iterations: 1,
        restarts: 5,
        rng_seed: fit_seed,
        ridge: 1e-8,
    };
    let start = Instant::now();
    let fit = em_fit(&timelines, &config).unwrap();
    let elapsed = start.elapsed();
    Recovery { fit, elapsed }
}

fn recovery_run() -> &'static Recovery {
    static CELL: OnceLock<Recovery> = OnceLock::new();
    CELL.get_or_init(|| recovery_fit(2_000, 107, 1_007))
}

fn recovery_errors(fit: &FitResult) -> (f64, f64) {
    let truth = presets::demo_generator();
    let tables = presets::demo_emission_tables();
    let mut worst_emission = 0.0f64;
    for state in 0..3 {
        for pattern in 0..4 {
            let probs = emission_probs(
                fit.params.beta.for_state(state),
                &covariates_for_pattern(pattern),
            );
            for k in 0..4 {
                worst_emission = worst_emission.max((probs[k] - tables[state][pattern][k]).abs());
            }
        }
    }
    let mut worst_q = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let rel = (fit.params.q.rate(i, j) - truth.rate(i, j)).abs() / truth.rate(i, j);
                worst_q = worst_q.max(rel);
            }
        }
    }
    (worst_emission, worst_q)
}

// Known to exceed its tolerances at this cohort size: the least-identified
// cells (the state-2/state-3 emission rows under rare previous events, and
// the 2 -> 3 rate) carry maximum-likelihood noise of roughly twice the stated
// bounds with 2,000 patients, and the errors halve when the cohort is
// quadrupled (see recovery_errors_shrink_with_cohort_size). The tolerances
// would need roughly a 4x larger cohort, or looser bounds, to be reliably
// attainable.
#[test]
fn c07_simulate_and_recover_reference_parameters() {
    let recovery = recovery_run();
    let fit = &recovery.fit;
    let truth = presets::demo_parameters();
    let tables = presets::demo_emission_tables();

    let (worst_emission, worst_q) = recovery_errors(fit);
    println!(
        "c07 parameter recovery: worst emission error {worst_emission:.4} (bound 0.03), worst \
         generator relative error {:.1}% (bound 20%), fitted in {:?}",
        100.0 * worst_q,
        recovery.elapsed
    );
    assert!(
        recovery.elapsed < Duration::from_secs(600),
        "took {:?}",
        recovery.elapsed
    );

    for state in 0..3 {
        for pattern in 0..4 {
            let probs = emission_probs(
                fit.params.beta.for_state(state),
                &covariates_for_pattern(pattern),
            );
            for k in 0..4 {
                let err = (probs[k] - tables[state][pattern][k]).abs();
                assert!(
                    err <= 0.03,
                    "state {} pattern {pattern} outcome {k}: {} vs {}",
                    state + 1,
                    probs[k],
                    tables[state][pattern][k]
                );
            }
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let rel = (fit.params.q.rate(i, j) - truth.q.rate(i, j)).abs() / truth.q.rate(i, j);
            assert!(
                rel <= 0.20,
                "q[{},{}]: {} vs {} ({:.1}%)",
                i + 1,
                j + 1,
                fit.params.q.rate(i, j),
                truth.q.rate(i, j),
                100.0 * rel
            );
        }
    }
    println!(
        "PASS c07 parameter recovery: worst emission error {worst_emission:.4}, worst \
         generator relative error {:.1}%",
        100.0 * worst_q
    );
}

/// Consistency evidence for the estimator behind c07: the same pipeline on a
/// four-times-larger cohort cuts the worst-cell errors roughly in half, the
/// expected maximum-likelihood scaling.
#[test]
fn recovery_errors_shrink_with_cohort_size() {
    let small = recovery_run();
    let large = recovery_fit(8_000, 107, 1_007);
    let (emission_small, q_small) = recovery_errors(&small.fit);
    let (emission_large, q_large) = recovery_errors(&large.fit);
    println!(
        "recovery error contraction: emissions {emission_small:.4} -> {emission_large:.4}, \
         generator {:.1}% -> {:.1}% (2,000 -> 8,000 patients)",
        100.0 * q_small,
        100.0 * q_large
    );
    assert!(emission_large < emission_small);
    assert!(q_large < q_small);
}

#[test]
fn c08_reference_table_round_trips_at_two_decimals() {
    let params = presets::demo_parameters();
    let csv = emission_table_csv(&params, false);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    let mut checked = 0;
    for (pattern, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], EventCode::ALL[pattern].label());
        for state in 0..3 {
            for k in 0..4 {
                let got = cells[1 + state * 4 + k];
                let want = format!("{:.2}", presets::DEMO_EMISSION_CELLS[state][pattern][k]);
                assert_eq!(got, want, "state {} row {pattern} col {k}", state + 1);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 48);
    println!("PASS c08 emission table round-trip: all 48 cells exact at two decimals");
}

#[test]
fn c09_stopping_rule_terminates_below_threshold() {
    let recovery = recovery_run();
    let fit = &recovery.fit;
    assert!(fit.converged, "fit did not converge");
    assert!(fit.n_iterations <= 500);
    assert!(
        fit.final_delta < 0.05,
        "final parameter delta {} not below threshold",
        fit.final_delta
    );
    println!(
        "PASS c09 stopping rule: converged in {} iterations with final delta {:.4}",
        fit.n_iterations, fit.final_delta
    );
}

#[test]
fn c10_initialization_follows_the_declared_distributions() {
    let config = FitConfig::default();
    let mut beta_sum = 0.0f64;
    let mut beta_sq_sum = 0.0f64;
    let mut n_beta = 0usize;
    for seed in 0..10_000u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params = initialize(&config, &mut rng);
        for s in 0..3 {
            assert_eq!(params.pi[s], 1.0 / 3.0, "pi must be exactly uniform");
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let q = params.q.rate(i, j);
                    assert!((0.0..=1.0).contains(&q), "off-diagonal {q} outside [0,1]");
                }
            }
        }
        for s in 0..3 {
            for v in params.beta.for_state(s) {
                beta_sum += v;
                beta_sq_sum += v * v;
                n_beta += 1;
            }
        }
    }
    let mean = beta_sum / n_beta as f64;
    let var = beta_sq_sum / n_beta as f64 - mean * mean;
    assert!(mean.abs() <= 0.05, "beta mean {mean}");
    assert!((var - 1.0).abs() <= 0.05, "beta variance {var}");
    println!(
        "PASS c10 initialization contract: 10000 seeds, beta mean {mean:.4}, variance {var:.4}"
    );
}

#[test]
fn c11_occupancy_limits_are_identity_and_stationary() {
    let q = presets::demo_generator();

    // Stationary distribution by a null-space solve, independent of the
    // exponential: pi Q = 0 with sum(pi) = 1.
    let stationary = {
        let n = 3;
        let mut m = [[0.0f64; 3]; 3];
        for i in 0..n {
            for j in 0..n {
                m[i][j] = q.rate(j, i);
            }
        }
        for j in 0..n {
            m[n - 1][j] = 1.0;
        }
        let mut rhs = [0.0, 0.0, 1.0];
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
                .unwrap();
            m.swap(col, pivot);
            rhs.swap(col, pivot);
            for row in (col + 1)..n {
                let f = m[row][col] / m[col][col];
                for c in col..n {
                    m[row][c] -= f * m[col][c];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut x = [0.0f64; 3];
        for col in (0..n).rev() {
            let mut acc = rhs[col];
            for c in (col + 1)..n {
                acc -= m[col][c] * x[c];
            }
            x[col] = acc / m[col][col];
        }
        x
    };

    let table = state_occupancy(&q, 1_000.0, 1_000.0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let identity = if i == j { 1.0 } else { 0.0 };
            assert!((table.matrices[0][[i, j]] - identity).abs() < 1e-15);
            let err = (table.matrices[1][[i, j]] - stationary[j]).abs();
            assert!(
                err <= 1e-8,
                "start {} state {}: {} vs stationary {}",
                i + 1,
                j + 1,
                table.matrices[1][[i, j]],
                stationary[j]
            );
        }
    }
    println!(
        "PASS c11 occupancy limits: identity at t=0, stationary ({:.4}, {:.4}, {:.4}) at t=1000",
        stationary[0], stationary[1], stationary[2]
    );
}
