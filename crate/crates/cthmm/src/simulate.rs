//! Generative sampler for the full model: latent continuous-time trajectories,
//! day-granular observation times from a Poisson visiting process, and
//! autoregressive categorical events. Hidden trajectories are kept alongside
//! the sampled timelines so decoding accuracy can be measured against truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Exp;
use rayon::prelude::*;

use crate::emission::{emission_probs, encode_covariates};
use crate::error::{Error, Result};
use crate::model::{
    validate_parameters, EventCode, ModelParameters, Observation, PatientTimeline, DAYS_PER_YEAR,
};

/// Simulation settings. Observation times follow a homogeneous Poisson process
/// with `observation_rate` visits per year on (0, horizon], optionally
/// preceded by an index observation at t = 0.
///
/// Sampled times are quantized to whole days (the resolution of the timeline
/// CSV schema), so writing a cohort out and ingesting it back reproduces the
/// in-memory timelines exactly.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub params: ModelParameters,
    pub n_patients: usize,
    pub observation_rate: f64,
    pub horizon_years: f64,
    pub rng_seed: u64,
    pub include_t0_observation: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let violations = validate_parameters(&self.params);
        if !violations.is_empty() {
            return Err(Error::Estimation(format!(
                "invalid simulation parameters: {}",
                violations.join("; ")
            )));
        }
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be at least 1".into()));
        }
        if !self.observation_rate.is_finite() || self.observation_rate <= 0.0 {
            return Err(Error::Config(format!(
                "observation_rate must be positive, got {}",
                self.observation_rate
            )));
        }
        if !self.horizon_years.is_finite() || self.horizon_years <= 0.0 {
            return Err(Error::Config(format!(
                "horizon must be positive, got {}",
                self.horizon_years
            )));
        }
        Ok(())
    }
}

/// A latent path: the initial state and the ordered jumps (time, new state).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub initial_state: usize,
    pub jumps: Vec<(f64, usize)>,
}

impl LatentTrajectory {
    /// State occupied at time `t` (the state entered by the last jump at or
    /// before `t`).
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jumps.partition_point(|&(jump_time, _)| jump_time <= t);
        if idx == 0 {
            self.initial_state
        } else {
            self.jumps[idx - 1].1
        }
    }
}

/// One simulated patient: the observable timeline plus the hidden truth.
#[derive(Debug, Clone)]
pub struct SimulatedPatient {
    pub timeline: PatientTimeline,
    pub trajectory: LatentTrajectory,
}

/// Gillespie sampling of the latent chain: exponential holding times with rate
/// -q_kk, next state proportional to the off-diagonal rates. States with zero
/// exit rate are absorbing.
pub fn sample_trajectory(
    params: &ModelParameters,
    horizon: f64,
    rng: &mut impl Rng,
) -> LatentTrajectory {
    let n = params.n_states();
    let mut state = sample_categorical(params.pi.iter().copied(), rng);
    let initial_state = state;
    let mut jumps = Vec::new();
    let mut t = 0.0;
    loop {
        let exit = params.q.exit_rate(state);
        if exit <= 0.0 {
            break;
        }
        t += rng.sample(Exp::new(exit).expect("positive exit rate"));
        if t > horizon {
            break;
        }
        let next = sample_categorical(
            (0..n).map(|l| if l == state { 0.0 } else { params.q.rate(state, l) }),
            rng,
        );
        jumps.push((t, next));
        state = next;
    }
    LatentTrajectory {
        initial_state,
        jumps,
    }
}

fn sample_categorical(weights: impl Iterator<Item = f64> + Clone, rng: &mut impl Rng) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        u -= w;
        last = i;
        if u < 0.0 {
            return i;
        }
    }
    last
}

/// Sample one patient: a latent trajectory, day-quantized Poisson observation
/// times, and events drawn from the emission model at the state occupied at
/// each observation time, conditioned on the previously sampled event.
pub fn sample_timeline(
    config: &SimConfig,
    patient_id: &str,
    rng: &mut impl Rng,
) -> Result<SimulatedPatient> {
    let trajectory = sample_trajectory(&config.params, config.horizon_years, rng);
    let arrival = Exp::new(config.observation_rate)
        .map_err(|_| Error::Config("observation_rate must be positive".into()))?;

    let mut days = std::collections::BTreeSet::new();
    loop {
        days.clear();
        if config.include_t0_observation {
            days.insert(0i64);
        }
        let mut t = 0.0;
        loop {
            t += rng.sample(arrival);
            if t > config.horizon_years {
                break;
            }
            days.insert((t * DAYS_PER_YEAR).round() as i64);
        }
        if !days.is_empty() {
            break;
        }
    }

    let mut prev: Option<EventCode> = None;
    let mut observations = Vec::with_capacity(days.len());
    for day in days {
        let time = day as f64 / DAYS_PER_YEAR;
        let state = trajectory.state_at(time);
        let probs = emission_probs(config.params.beta.for_state(state), &encode_covariates(prev));
        let event = EventCode::ALL[sample_categorical(probs.iter().copied(), rng)];
        observations.push(Observation { time, event });
        prev = Some(event);
    }

    Ok(SimulatedPatient {
        timeline: PatientTimeline::new(patient_id, observations)?,
        trajectory,
    })
}

/// Sample a cohort. Each patient gets an independent RNG stream derived from
/// the master seed, so the output is deterministic regardless of how the
/// parallel sweep is scheduled.
pub fn sample_cohort(config: &SimConfig) -> Result<Vec<SimulatedPatient>> {
    config.validate()?;
    let mut seed_rng = ChaCha12Rng::seed_from_u64(config.rng_seed);
    let seeds: Vec<u64> = (0..config.n_patients).map(|_| seed_rng.random()).collect();
    let width = config.n_patients.to_string().len().max(4);
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            sample_timeline(config, &format!("P{:0width$}", i + 1), &mut rng)
        })
        .collect()
}
