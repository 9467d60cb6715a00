//! The outer EM loop: initialization, the three M-steps (initial distribution,
//! emission coefficients, generator), the stopping rule, and multi-restart
//! orchestration.
//!
//! The generator M-step follows the endpoint-conditioned scheme: for every
//! interval the expected sojourn times and jump counts given each endpoint
//! pair come from Van Loan integrals under the current generator, weighted by
//! the pairwise posteriors, and the new rates are the jump/sojourn ratios.
//! With one inner cycle per outer iteration this is an exact EM step on the
//! joint complete-data likelihood, so the observed log-likelihood never
//! decreases.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::emission::{encode_covariates, fit_weighted_multinomial, WeightedEmissionSample};
use crate::error::{Error, Result};
use crate::inference::cohort_e_step;
use crate::matexp::BridgeCache;
use crate::model::{
    canonical_state_order, validate_parameters, EmissionCoefficients, GeneratorMatrix,
    ModelParameters, PatientTimeline, PosteriorSummary, N_COVARIATES, N_LOGITS,
};

/// Expected sufficient statistics of one E-step sweep.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// Expected total sojourn time per state, in years.
    pub sojourn: Array1<f64>,
    /// Expected jump counts between distinct states; the diagonal stays zero.
    pub jumps: Array2<f64>,
    /// Sum of first-observation state marginals across patients.
    pub first_obs_gamma_sum: Array1<f64>,
    pub first_obs_count: usize,
    /// Per-state weighted emission samples for the multinomial M-step.
    pub emission_samples: Vec<Vec<WeightedEmissionSample>>,
}

impl SufficientStats {
    fn zeros(n_states: usize) -> Self {
        Self {
            sojourn: Array1::zeros(n_states),
            jumps: Array2::zeros((n_states, n_states)),
            first_obs_gamma_sum: Array1::zeros(n_states),
            first_obs_count: 0,
            emission_samples: vec![Vec::new(); n_states],
        }
    }

    /// Total expected exposure; equals the summed interval lengths of the
    /// cohort when the statistics come from a full sweep.
    pub fn total_sojourn(&self) -> f64 {
        self.sojourn.sum()
    }
}

/// EM configuration. Defaults: 3 states, convergence threshold 0.05 on the
/// Euclidean norm of the concatenated parameter delta, 500 outer iterations,
/// one inner generator cycle, 5 restarts, ridge 1e-8.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub n_states: usize,
    pub convergence_threshold: f64,
    pub max_outer_iterations: usize,
    pub inner_q_iterations: usize,
    pub restarts: usize,
    pub rng_seed: u64,
    pub ridge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_states: 3,
            convergence_threshold: 0.05,
            max_outer_iterations: 500,
            inner_q_iterations: 1,
            restarts: 5,
            rng_seed: 0,
            ridge: 1e-8,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Config("n_states must be positive".into()));
        }
        if !self.convergence_threshold.is_finite() || self.convergence_threshold <= 0.0 {
            return Err(Error::Config("convergence threshold must be positive".into()));
        }
        if self.max_outer_iterations == 0 || self.inner_q_iterations == 0 || self.restarts == 0 {
            return Err(Error::Config(
                "iteration and restart counts must be positive".into(),
            ));
        }
        if !self.ridge.is_finite() || self.ridge < 0.0 {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Outcome of a fit: canonically ordered parameters, the log-likelihood trace
/// (one entry per E-step, including a final evaluation at the returned
/// parameters), and convergence bookkeeping.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParameters,
    pub log_likelihood_trace: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    /// Parameter-delta norm of the last completed iteration.
    pub final_delta: f64,
    pub warnings: Vec<String>,
}

/// Draw a starting point: uniform initial distribution, standard-normal
/// emission coefficients, Uniform(0,1) off-diagonal rates. Deterministic for a
/// given generator state.
pub fn initialize(config: &FitConfig, rng: &mut impl Rng) -> ModelParameters {
    let n = config.n_states;
    let pi = Array1::from_elem(n, 1.0 / n as f64);
    let beta = EmissionCoefficients::from_raw(
        (0..n)
            .map(|_| Array2::from_shape_fn((N_LOGITS, N_COVARIATES), |_| rng.sample(StandardNormal)))
            .collect(),
    );
    let mut off = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off[[i, j]] = rng.random::<f64>();
            }
        }
    }
    ModelParameters {
        pi,
        q: GeneratorMatrix::from_off_diagonal(off).expect("uniform draws form a valid generator"),
        beta,
    }
}

/// Mean first-observation state marginal across patients.
pub fn update_pi(posteriors: &[PosteriorSummary]) -> Result<Array1<f64>> {
    if posteriors.is_empty() {
        return Err(Error::Estimation("update_pi needs a nonempty cohort".into()));
    }
    let n = posteriors[0].gamma.ncols();
    let mut pi = Array1::<f64>::zeros(n);
    for p in posteriors {
        for s in 0..n {
            pi[s] += p.gamma[[0, s]];
        }
    }
    let total = pi.sum();
    pi.mapv_inplace(|v| v / total);
    Ok(pi)
}

/// Accumulate the full sufficient statistics of one sweep: expected sojourn
/// times and jump counts from endpoint-conditioned Van Loan integrals under
/// `q_current` weighted by the pairwise posteriors, plus first-observation
/// marginals and the per-state weighted emission samples.
pub fn accumulate_q_stats(
    posteriors: &[PosteriorSummary],
    timelines: &[PatientTimeline],
    q_current: &GeneratorMatrix,
) -> Result<SufficientStats> {
    if posteriors.len() != timelines.len() {
        return Err(Error::Estimation(format!(
            "posterior/timeline misalignment: {} posteriors for {} timelines",
            posteriors.len(),
            timelines.len()
        )));
    }
    let n = q_current.n_states();
    let cache = BridgeCache::build(q_current, timelines.iter().flat_map(|tl| tl.intervals()))?;
    let mut stats = SufficientStats::zeros(n);

    for (tl, post) in timelines.iter().zip(posteriors) {
        if post.xi.len() + 1 != tl.n_observations() || post.gamma.nrows() != tl.n_observations() {
            return Err(Error::Estimation(format!(
                "patient {}: posterior does not match its timeline",
                tl.patient_id()
            )));
        }

        stats.first_obs_count += 1;
        for s in 0..n {
            stats.first_obs_gamma_sum[s] += post.gamma[[0, s]];
        }

        let mut prev = None;
        for (t, obs) in tl.observations().iter().enumerate() {
            let covariates = encode_covariates(prev);
            for s in 0..n {
                stats.emission_samples[s].push(WeightedEmissionSample {
                    covariates,
                    outcome: obs.event,
                    weight: post.gamma[[t, s]],
                });
            }
            prev = Some(obs.event);
        }

        for (dt, xi) in tl.intervals().zip(&post.xi) {
            let ops = cache
                .get(dt)
                .ok_or_else(|| Error::Numerical(format!("bridge cache missing dt = {dt}")))?;
            accumulate_interval(
                xi,
                ops.kernel().probs(),
                |k, l| ops.integral(k, l),
                q_current,
                tl.patient_id(),
                &mut stats.sojourn,
                &mut stats.jumps,
            )?;
        }
    }
    Ok(stats)
}

fn accumulate_interval<'a>(
    xi: &Array2<f64>,
    kernel: &Array2<f64>,
    integral: impl Fn(usize, usize) -> &'a Array2<f64>,
    q: &GeneratorMatrix,
    patient_id: &str,
    sojourn: &mut Array1<f64>,
    jumps: &mut Array2<f64>,
) -> Result<()> {
    let n = xi.nrows();
    for a in 0..n {
        for b in 0..n {
            let weight = xi[[a, b]];
            if weight == 0.0 {
                continue;
            }
            let p_ab = kernel[[a, b]];
            if p_ab < 1e-300 {
                if weight > 1e-12 {
                    return Err(Error::Numerical(format!(
                        "patient {patient_id}: endpoint pair ({a},{b}) has posterior weight \
                         {weight} but vanishing transition probability"
                    )));
                }
                continue;
            }
            let scale = weight / p_ab;
            for k in 0..n {
                sojourn[k] += scale * integral(k, k)[[a, b]];
                for l in 0..n {
                    if l != k {
                        let rate = q.rate(k, l);
                        if rate > 0.0 {
                            jumps[[k, l]] += scale * rate * integral(k, l)[[a, b]];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Generator M-step: new rates are expected jumps over expected sojourn.
/// States with (numerically) zero expected occupancy keep their current row
/// and are reported as warnings instead of aborting the fit.
pub fn update_q(
    stats: &SufficientStats,
    q_current: &GeneratorMatrix,
) -> (GeneratorMatrix, Vec<String>) {
    let n = q_current.n_states();
    let mut off = Array2::<f64>::zeros((n, n));
    let mut warnings = Vec::new();
    for k in 0..n {
        if stats.sojourn[k] < 1e-10 {
            warnings.push(format!(
                "state {}: no expected occupancy; generator row left unchanged",
                k + 1
            ));
            for l in 0..n {
                if l != k {
                    off[[k, l]] = q_current.rate(k, l);
                }
            }
            continue;
        }
        for l in 0..n {
            if l != k {
                off[[k, l]] = stats.jumps[[k, l]] / stats.sojourn[k];
            }
        }
    }
    let q = GeneratorMatrix::from_off_diagonal(off)
        .expect("jump/sojourn ratios are nonnegative and finite");
    (q, warnings)
}

/// Euclidean norm of the difference between two parameter sets over the
/// concatenated vector (pi entries, Q off-diagonals, beta entries).
pub fn parameter_delta(a: &ModelParameters, b: &ModelParameters) -> f64 {
    let n = a.n_states();
    let mut acc = 0.0;
    for s in 0..n {
        let d = a.pi[s] - b.pi[s];
        acc += d * d;
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = a.q.rate(i, j) - b.q.rate(i, j);
                acc += d * d;
            }
        }
    }
    for s in 0..n {
        for (x, y) in a.beta.for_state(s).iter().zip(b.beta.for_state(s).iter()) {
            let d = x - y;
            acc += d * d;
        }
    }
    acc.sqrt()
}

struct RestartOutcome {
    params: ModelParameters,
    trace: Vec<f64>,
    n_iterations: usize,
    converged: bool,
    final_delta: f64,
    warnings: Vec<String>,
}

fn run_restart(
    timelines: &[PatientTimeline],
    config: &FitConfig,
    seed: u64,
) -> Result<RestartOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = initialize(config, &mut rng);
    let mut trace = Vec::new();
    let mut warnings = std::collections::BTreeSet::new();
    let mut converged = false;
    let mut n_iterations = 0;
    let mut final_delta = f64::INFINITY;

    for _ in 0..config.max_outer_iterations {
        let (posteriors, log_likelihood) = cohort_e_step(timelines, &params)?;
        trace.push(log_likelihood);

        let pi_new = update_pi(&posteriors)?;
        let mut stats = accumulate_q_stats(&posteriors, timelines, &params.q)?;

        let beta_fits: Result<Vec<(Array2<f64>, bool)>> = stats
            .emission_samples
            .par_iter()
            .map(|samples| fit_weighted_multinomial(samples, config.ridge))
            .collect();
        let mut beta_blocks = Vec::with_capacity(config.n_states);
        for (s, (block, fit_converged)) in beta_fits?.into_iter().enumerate() {
            if !fit_converged {
                warnings.insert(format!(
                    "state {}: emission fit stopped at its iteration cap",
                    s + 1
                ));
            }
            beta_blocks.push(block);
        }

        let (mut q_new, warns) = update_q(&stats, &params.q);
        warnings.extend(warns);
        for _ in 1..config.inner_q_iterations {
            stats = accumulate_q_stats(&posteriors, timelines, &q_new)?;
            let (refined, warns) = update_q(&stats, &q_new);
            q_new = refined;
            warnings.extend(warns);
        }

        let new_params = ModelParameters {
            pi: pi_new,
            q: q_new,
            beta: EmissionCoefficients::from_raw(beta_blocks),
        };
        final_delta = parameter_delta(&params, &new_params);
        params = new_params;
        n_iterations += 1;

        if final_delta < config.convergence_threshold {
            converged = true;
            break;
        }
    }

    // Evaluate the returned parameters so the trace ends at their likelihood.
    let (_, final_ll) = cohort_e_step(timelines, &params)?;
    trace.push(final_ll);

    Ok(RestartOutcome {
        params,
        trace,
        n_iterations,
        converged,
        final_delta,
        warnings: warnings.into_iter().collect(),
    })
}

/// Fit by EM with random restarts; the winner is the restart with the highest
/// final log-likelihood, returned in canonical state order.
pub fn em_fit(timelines: &[PatientTimeline], config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if timelines.is_empty() {
        return Err(Error::Estimation("em_fit needs a nonempty cohort".into()));
    }

    let mut seed_rng = ChaCha12Rng::seed_from_u64(config.rng_seed);
    let seeds: Vec<u64> = (0..config.restarts).map(|_| seed_rng.random()).collect();

    let mut best: Option<(usize, RestartOutcome)> = None;
    let mut failures = Vec::new();
    for (index, &seed) in seeds.iter().enumerate() {
        match run_restart(timelines, config, seed) {
            Ok(outcome) => {
                let better = match &best {
                    None => true,
                    Some((_, incumbent)) => {
                        outcome.trace.last().unwrap() > incumbent.trace.last().unwrap()
                    }
                };
                if better {
                    best = Some((index, outcome));
                }
            }
            Err(err) => failures.push(format!("restart {index}: {err}")),
        }
    }

    let (restart_index, outcome) = best.ok_or_else(|| {
        Error::Estimation(format!("all restarts failed: {}", failures.join("; ")))
    })?;

    let (_, params) = canonical_state_order(&outcome.params);
    let violations = validate_parameters(&params);
    if !violations.is_empty() {
        return Err(Error::Estimation(format!(
            "fit produced invalid parameters: {}",
            violations.join("; ")
        )));
    }

    Ok(FitResult {
        params,
        log_likelihood_trace: outcome.trace,
        n_iterations: outcome.n_iterations,
        converged: outcome.converged,
        restart_index,
        final_delta: outcome.final_delta,
        warnings: outcome.warnings,
    })
}
