//! E-step machinery: scaled forward-backward over irregular intervals, state
//! marginals and pairwise endpoint posteriors, decoding, and occupancy curves.
//!
//! The forward pass normalizes at each observation and accumulates the log of
//! the normalizers, which is the exact log-likelihood. Scaled arithmetic keeps
//! the inner loop free of log-sum-exp while avoiding underflow on long
//! timelines.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::emission::{emission_probs, encode_covariates};
use crate::error::{Error, Result};
use crate::matexp::{transition_kernel, KernelCache, TransitionKernel};
use crate::model::{
    validate_parameters, EmissionCoefficients, EventCode, GeneratorMatrix, ModelParameters,
    PatientTimeline, PosteriorSummary,
};

/// Per-observation emission likelihood vectors, one row per observation: entry
/// (t, s) is P(event_t | state s, previous event). Entries are strictly
/// positive because the emission model is a softmax.
pub type EmissionMatrixSequence = Array2<f64>;

/// Evaluate the emission likelihood of every observation under every state.
pub fn emission_matrix(
    timeline: &PatientTimeline,
    beta: &EmissionCoefficients,
) -> EmissionMatrixSequence {
    let obs = timeline.observations();
    let n = beta.n_states();
    let mut b = Array2::zeros((obs.len(), n));
    let mut prev: Option<EventCode> = None;
    for (t, o) in obs.iter().enumerate() {
        let x = encode_covariates(prev);
        for s in 0..n {
            b[[t, s]] = emission_probs(beta.for_state(s), &x)[o.event.index()];
        }
        prev = Some(o.event);
    }
    b
}

fn check_params(params: &ModelParameters) -> Result<()> {
    let violations = validate_parameters(params);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Estimation(format!(
            "invalid parameters: {}",
            violations.join("; ")
        )))
    }
}

/// Scaled forward-backward over one timeline. Returns the state marginals
/// gamma (one row per observation), the endpoint-pair posteriors xi (one
/// matrix per interval, each summing to one), and the exact log-likelihood.
pub fn forward_backward(
    timeline: &PatientTimeline,
    params: &ModelParameters,
) -> Result<PosteriorSummary> {
    check_params(params)?;
    let cache = KernelCache::build(&params.q, timeline.intervals())?;
    forward_backward_cached(timeline, params, &cache)
}

/// Forward-backward with transition kernels served from a prebuilt cache.
/// The cache must cover every interval length of the timeline and have been
/// built from `params.q`.
pub fn forward_backward_cached(
    timeline: &PatientTimeline,
    params: &ModelParameters,
    cache: &KernelCache,
) -> Result<PosteriorSummary> {
    let n = params.n_states();
    let obs = timeline.observations();
    let t_len = obs.len();
    let b = emission_matrix(timeline, &params.beta);

    let kernels: Vec<&TransitionKernel> = timeline
        .intervals()
        .map(|dt| {
            cache.get(dt).ok_or_else(|| {
                Error::Numerical(format!(
                    "patient {}: kernel cache is missing dt = {dt}",
                    timeline.patient_id()
                ))
            })
        })
        .collect::<Result<_>>()?;

    let mut alpha = Array2::<f64>::zeros((t_len, n));
    let mut normalizers = vec![0.0f64; t_len];
    let mut log_likelihood = 0.0;

    for s in 0..n {
        alpha[[0, s]] = params.pi[s] * b[[0, s]];
    }
    for t in 0..t_len {
        if t > 0 {
            let p = kernels[t - 1].probs();
            for s_next in 0..n {
                let mut acc = 0.0;
                for s in 0..n {
                    acc += alpha[[t - 1, s]] * p[[s, s_next]];
                }
                alpha[[t, s_next]] = acc * b[[t, s_next]];
            }
        }
        let c: f64 = (0..n).map(|s| alpha[[t, s]]).sum();
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::Numerical(format!(
                "patient {}: zero-probability observation sequence at index {t}",
                timeline.patient_id()
            )));
        }
        for s in 0..n {
            alpha[[t, s]] /= c;
        }
        normalizers[t] = c;
        log_likelihood += c.ln();
    }

    let mut beta_hat = Array2::<f64>::zeros((t_len, n));
    for s in 0..n {
        beta_hat[[t_len - 1, s]] = 1.0;
    }
    for t in (0..t_len - 1).rev() {
        let p = kernels[t].probs();
        for s in 0..n {
            let mut acc = 0.0;
            for s_next in 0..n {
                acc += p[[s, s_next]] * b[[t + 1, s_next]] * beta_hat[[t + 1, s_next]];
            }
            beta_hat[[t, s]] = acc / normalizers[t + 1];
        }
    }

    let mut gamma = Array2::<f64>::zeros((t_len, n));
    for t in 0..t_len {
        for s in 0..n {
            gamma[[t, s]] = alpha[[t, s]] * beta_hat[[t, s]];
        }
    }

    let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len - 1 {
        let p = kernels[t].probs();
        let mut m = Array2::<f64>::zeros((n, n));
        for s in 0..n {
            for s_next in 0..n {
                m[[s, s_next]] = alpha[[t, s]]
                    * p[[s, s_next]]
                    * b[[t + 1, s_next]]
                    * beta_hat[[t + 1, s_next]]
                    / normalizers[t + 1];
            }
        }
        xi.push(m);
    }

    Ok(PosteriorSummary {
        patient_id: timeline.patient_id().to_string(),
        gamma,
        xi,
        log_likelihood,
    })
}

/// Forward-backward across a cohort. Kernels for every distinct interval
/// length are prebuilt once, then patients are swept in parallel; results keep
/// the input order, so the returned total is reproducible bit for bit.
pub fn cohort_e_step(
    timelines: &[PatientTimeline],
    params: &ModelParameters,
) -> Result<(Vec<PosteriorSummary>, f64)> {
    if timelines.is_empty() {
        return Err(Error::Estimation("cohort is empty".into()));
    }
    check_params(params)?;
    let cache = KernelCache::build(&params.q, timelines.iter().flat_map(|tl| tl.intervals()))?;
    let posteriors: Result<Vec<PosteriorSummary>> = timelines
        .par_iter()
        .map(|tl| forward_backward_cached(tl, params, &cache))
        .collect();
    let posteriors = posteriors?;
    let total = posteriors.iter().map(|p| p.log_likelihood).sum();
    Ok((posteriors, total))
}

/// One observation of a decoded timeline: the posterior state marginals and
/// their argmax.
#[derive(Debug, Clone)]
pub struct DecodedPoint {
    pub time: f64,
    pub event: EventCode,
    pub gamma: Array1<f64>,
    /// Index of the maximal gamma entry; ties break toward the lower index.
    pub state: usize,
}

/// Posterior-marginal decoding of one timeline.
#[derive(Debug, Clone)]
pub struct DecodedTimeline {
    pub patient_id: String,
    pub points: Vec<DecodedPoint>,
}

/// Decode a timeline to its most probable state per observation under the
/// posterior marginals (not a joint most-probable path).
pub fn decode(timeline: &PatientTimeline, params: &ModelParameters) -> Result<DecodedTimeline> {
    let posterior = forward_backward(timeline, params)?;
    let points = timeline
        .observations()
        .iter()
        .enumerate()
        .map(|(t, obs)| {
            let gamma = posterior.gamma.row(t).to_owned();
            let mut state = 0;
            for s in 1..gamma.len() {
                if gamma[s] > gamma[state] {
                    state = s;
                }
            }
            DecodedPoint {
                time: obs.time,
                event: obs.event,
                gamma,
                state,
            }
        })
        .collect();
    Ok(DecodedTimeline {
        patient_id: timeline.patient_id().to_string(),
        points,
    })
}

/// Occupancy distributions on a time grid: row i of `matrices[j]` is the
/// probability of each state at `times[j]` given a start in state i.
#[derive(Debug, Clone)]
pub struct OccupancyTable {
    pub times: Vec<f64>,
    pub matrices: Vec<Array2<f64>>,
}

/// Evaluate exp(Q t) on the grid {0, grid_step, 2 grid_step, ...} up to
/// `horizon` inclusive.
pub fn state_occupancy(
    q: &GeneratorMatrix,
    horizon: f64,
    grid_step: f64,
) -> Result<OccupancyTable> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::Config(format!(
            "occupancy horizon must be positive, got {horizon}"
        )));
    }
    if !grid_step.is_finite() || grid_step <= 0.0 || grid_step > horizon {
        return Err(Error::Config(format!(
            "occupancy grid step must lie in (0, horizon], got {grid_step}"
        )));
    }
    let n_steps = (horizon / grid_step + 1e-9).floor() as usize;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut matrices = Vec::with_capacity(n_steps + 1);
    for step in 0..=n_steps {
        let t = step as f64 * grid_step;
        times.push(t);
        if step == 0 {
            matrices.push(Array2::eye(q.n_states()));
        } else {
            matrices.push(transition_kernel(q, t)?.probs().clone());
        }
    }
    Ok(OccupancyTable { times, matrices })
}
