//! Continuous-time hidden Markov models with autoregressive multinomial
//! emissions, for irregularly observed categorical event sequences.
//!
//! The latent state follows a continuous-time Markov chain with generator `Q`
//! (so the transition matrix over a gap of `dt` years is `exp(Q dt)`), and at
//! each observation time one of four event categories is emitted from a
//! per-state multinomial logistic model whose covariates are an intercept and
//! a one-hot encoding of the previous observed event. The crate provides:
//!
//! - [`inference`]: scaled forward-backward over irregular intervals, state
//!   marginals, pairwise endpoint posteriors, decoding, occupancy curves;
//! - [`estimation`]: the EM loop with random restarts, including the
//!   endpoint-conditioned generator update built on Van Loan integrals;
//! - [`matexp`]: Padé scaling-and-squaring exponentials and interval caches;
//! - [`emission`]: the multinomial GLM, its weighted Newton M-step, and the
//!   log-odds inversion of probability tables;
//! - [`simulate`]: a generative sampler for end-to-end recovery checks;
//! - [`io`]: CSV ingestion with the same-day severity rule, plain-text
//!   parameter files, and the report writers behind the `cthmm` binary.
//!
//! Start with the runnable examples (`cargo run --release --example fit_em`),
//! or:
//!
//! ```
//! use cthmm::{forward_backward, presets, simulate::{sample_cohort, SimConfig}};
//!
//! let config = SimConfig {
//!     params: presets::demo_parameters(),
//!     n_patients: 5,
//!     observation_rate: 3.0,
//!     horizon_years: 2.0,
//!     rng_seed: 1,
//!     include_t0_observation: true,
//! };
//! let cohort = sample_cohort(&config)?;
//! let posterior = forward_backward(&cohort[0].timeline, &config.params)?;
//! assert!(posterior.log_likelihood < 0.0);
//! # Ok::<(), cthmm::Error>(())
//! ```

pub mod emission;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod io;
mod linalg;
pub mod matexp;
pub mod model;
pub mod presets;
pub mod simulate;

pub use error::{Error, Result};
pub use estimation::{em_fit, FitConfig, FitResult};
pub use inference::{cohort_e_step, decode, forward_backward, state_occupancy};
pub use model::{
    canonical_state_order, validate_parameters, EmissionCoefficients, EventCode, GeneratorMatrix,
    ModelParameters, Observation, PatientTimeline, PosteriorSummary,
};
