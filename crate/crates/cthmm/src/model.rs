//! Core domain types shared by every other module: observable events, patient
//! timelines, and the three-block parameter set (initial distribution, generator
//! matrix, emission coefficients).

use ndarray::{Array1, Array2};

use crate::emission::{emission_probs, encode_covariates};
use crate::error::{Error, Result};

/// Observable event categories.
pub const N_EVENTS: usize = 4;
/// Logit rows per state: each non-reference outcome against GP.
pub const N_LOGITS: usize = N_EVENTS - 1;
/// Covariates per logit row: intercept plus three previous-event indicators.
pub const N_COVARIATES: usize = 4;
/// Conversion factor for day-granular records.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// One of the four observable healthcare-utilization events.
///
/// The variant order (GP, ED, Hosp, Spec) fixes the outcome index used in
/// probability vectors and report columns. Severity for same-day collapsing is
/// a different order, Hosp > ED > Spec > GP; see [`EventCode::severity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventCode {
    /// General-practitioner visit (reference outcome of the emission model).
    Gp,
    /// Emergency-department visit.
    Ed,
    /// Hospitalization.
    Hosp,
    /// Specialist visit.
    Spec,
}

impl EventCode {
    pub const ALL: [EventCode; N_EVENTS] =
        [EventCode::Gp, EventCode::Ed, EventCode::Hosp, EventCode::Spec];

    /// Outcome index in probability vectors: GP 0, ED 1, Hosp 2, Spec 3.
    pub fn index(self) -> usize {
        match self {
            EventCode::Gp => 0,
            EventCode::Ed => 1,
            EventCode::Hosp => 2,
            EventCode::Spec => 3,
        }
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        EventCode::ALL.get(idx).copied()
    }

    /// Severity rank used when collapsing same-day events: Hosp > ED > Spec > GP.
    pub fn severity(self) -> u8 {
        match self {
            EventCode::Gp => 0,
            EventCode::Spec => 1,
            EventCode::Ed => 2,
            EventCode::Hosp => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EventCode::Gp => "GP",
            EventCode::Ed => "ED",
            EventCode::Hosp => "Hosp",
            EventCode::Spec => "Spec",
        }
    }

    /// Parse the exact labels used in the timeline CSV schema.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "GP" => Some(EventCode::Gp),
            "ED" => Some(EventCode::Ed),
            "Hosp" => Some(EventCode::Hosp),
            "Spec" => Some(EventCode::Spec),
            _ => None,
        }
    }
}

impl std::fmt::Display for EventCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A single observed event at a time expressed in years since the patient's
/// index date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub event: EventCode,
}

/// One patient's strictly time-ordered observation sequence.
///
/// Same-day events must already be collapsed at ingestion; construction rejects
/// ties and out-of-order times.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTimeline {
    patient_id: String,
    observations: Vec<Observation>,
}

impl PatientTimeline {
    pub fn new(patient_id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let patient_id = patient_id.into();
        if observations.is_empty() {
            return Err(Error::Data(format!(
                "patient {patient_id}: timeline needs at least one observation"
            )));
        }
        for obs in &observations {
            if !obs.time.is_finite() || obs.time < 0.0 {
                return Err(Error::Data(format!(
                    "patient {patient_id}: observation time {} must be finite and nonnegative",
                    obs.time
                )));
            }
        }
        for pair in observations.windows(2) {
            if pair[1].time <= pair[0].time {
                return Err(Error::Data(format!(
                    "patient {patient_id}: observation times must be strictly increasing \
                     ({} then {})",
                    pair[0].time, pair[1].time
                )));
            }
        }
        Ok(Self {
            patient_id,
            observations,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    /// Interval lengths between consecutive observations, in years.
    pub fn intervals(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations
            .windows(2)
            .map(|pair| pair[1].time - pair[0].time)
    }
}

/// Generator (rate) matrix of the latent continuous-time Markov chain.
///
/// Off-diagonal entries are nonnegative transition rates per year; each
/// diagonal entry is the negated sum of its row's off-diagonals, so rows sum
/// to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    rates: Array2<f64>,
}

impl GeneratorMatrix {
    /// Build from a full matrix whose off-diagonal entries are the rates; the
    /// diagonal is recomputed as the negated off-diagonal row sum.
    pub fn from_off_diagonal(mut rates: Array2<f64>) -> Result<Self> {
        let n = rates.nrows();
        if n == 0 || rates.ncols() != n {
            return Err(Error::Numerical(
                "generator matrix must be square and nonempty".into(),
            ));
        }
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = rates[[i, j]];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Numerical(format!(
                        "generator rate q[{},{}] = {v} must be finite and nonnegative",
                        i + 1,
                        j + 1
                    )));
                }
                row_sum += v;
            }
            rates[[i, i]] = -row_sum;
        }
        Ok(Self { rates })
    }

    /// Wrap a matrix without any checks. Intended for tests and for callers
    /// that need to hand deliberately invalid values to [`validate_parameters`].
    pub fn from_raw(rates: Array2<f64>) -> Self {
        Self { rates }
    }

    /// The frozen chain: no transitions at all.
    pub fn zero(n_states: usize) -> Self {
        Self {
            rates: Array2::zeros((n_states, n_states)),
        }
    }

    pub fn n_states(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &Array2<f64> {
        &self.rates
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[[from, to]]
    }

    /// Total rate of leaving state `k` (zero for an absorbing state).
    pub fn exit_rate(&self, k: usize) -> f64 {
        -self.rates[[k, k]]
    }
}

/// Per-state multinomial logistic coefficients.
///
/// Each state holds a `N_LOGITS x N_COVARIATES` block; row order is
/// (ED, Hosp, Spec) against the GP reference, column order is
/// (intercept, prev ED, prev Hosp, prev Spec).
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionCoefficients {
    per_state: Vec<Array2<f64>>,
}

impl EmissionCoefficients {
    pub fn from_matrices(per_state: Vec<Array2<f64>>) -> Result<Self> {
        if per_state.is_empty() {
            return Err(Error::Numerical(
                "emission coefficients need at least one state".into(),
            ));
        }
        for (s, m) in per_state.iter().enumerate() {
            if m.nrows() != N_LOGITS || m.ncols() != N_COVARIATES {
                return Err(Error::Numerical(format!(
                    "state {}: coefficient block must be {N_LOGITS}x{N_COVARIATES}, got {}x{}",
                    s + 1,
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "state {}: coefficient block has a non-finite entry",
                    s + 1
                )));
            }
        }
        Ok(Self { per_state })
    }

    /// Wrap without checks; see [`GeneratorMatrix::from_raw`].
    pub fn from_raw(per_state: Vec<Array2<f64>>) -> Self {
        Self { per_state }
    }

    /// All-zero coefficients (uniform emissions in every state).
    pub fn zeros(n_states: usize) -> Self {
        Self {
            per_state: vec![Array2::zeros((N_LOGITS, N_COVARIATES)); n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.per_state.len()
    }

    pub fn for_state(&self, state: usize) -> &Array2<f64> {
        &self.per_state[state]
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.per_state
    }
}

/// Complete parameter set: initial distribution `pi`, generator `Q`, and
/// emission coefficients `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub pi: Array1<f64>,
    pub q: GeneratorMatrix,
    pub beta: EmissionCoefficients,
}

impl ModelParameters {
    /// Validated construction; rejects any violation reported by
    /// [`validate_parameters`].
    pub fn new(pi: Array1<f64>, q: GeneratorMatrix, beta: EmissionCoefficients) -> Result<Self> {
        let params = Self { pi, q, beta };
        let violations = validate_parameters(&params);
        if violations.is_empty() {
            Ok(params)
        } else {
            Err(Error::Estimation(format!(
                "invalid parameters: {}",
                violations.join("; ")
            )))
        }
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }
}

/// Posterior quantities for one patient: per-observation state marginals
/// (`gamma`, one row per observation), per-interval endpoint-pair posteriors
/// (`xi`, one matrix per consecutive observation pair), and the timeline's
/// log-likelihood.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub patient_id: String,
    pub gamma: Array2<f64>,
    pub xi: Vec<Array2<f64>>,
    pub log_likelihood: f64,
}

/// Check every structural invariant of a parameter set and describe each
/// violation. Returns an empty list for well-formed parameters; never aborts.
pub fn validate_parameters(params: &ModelParameters) -> Vec<String> {
    let mut violations = Vec::new();
    let n = params.pi.len();

    if n == 0 {
        violations.push("pi: must have at least one state".to_string());
    }
    if params.q.n_states() != n {
        violations.push(format!(
            "Q: has {} states but pi has {n}",
            params.q.n_states()
        ));
    }
    if params.beta.n_states() != n {
        violations.push(format!(
            "beta: has {} states but pi has {n}",
            params.beta.n_states()
        ));
    }

    let mut pi_sum = 0.0;
    for (i, &p) in params.pi.iter().enumerate() {
        if !p.is_finite() {
            violations.push(format!("pi[{}]: non-finite entry {p}", i + 1));
        } else if p < 0.0 {
            violations.push(format!("pi[{}]: negative entry {p}", i + 1));
        }
        pi_sum += p;
    }
    if pi_sum.is_finite() && (pi_sum - 1.0).abs() > 1e-12 {
        violations.push(format!("pi: entries sum to {pi_sum}, expected 1 within 1e-12"));
    }

    let q = params.q.rates();
    if q.nrows() == q.ncols() {
        for i in 0..q.nrows() {
            let mut row_sum = 0.0;
            for j in 0..q.ncols() {
                let v = q[[i, j]];
                if !v.is_finite() {
                    violations.push(format!("Q[{},{}]: non-finite entry {v}", i + 1, j + 1));
                } else if i != j && v < 0.0 {
                    violations.push(format!(
                        "Q[{},{}]: off-diagonal entry {v} must be nonnegative",
                        i + 1,
                        j + 1
                    ));
                }
                row_sum += v;
            }
            if row_sum.is_finite() && row_sum.abs() > 1e-12 {
                violations.push(format!(
                    "Q row {}: sums to {row_sum}, expected 0 within 1e-12",
                    i + 1
                ));
            }
        }
    } else {
        violations.push("Q: matrix is not square".to_string());
    }

    for (s, m) in params.beta.matrices().iter().enumerate() {
        if m.nrows() != N_LOGITS || m.ncols() != N_COVARIATES {
            violations.push(format!(
                "beta state {}: block is {}x{}, expected {N_LOGITS}x{N_COVARIATES}",
                s + 1,
                m.nrows(),
                m.ncols()
            ));
        } else if m.iter().any(|v| !v.is_finite()) {
            violations.push(format!("beta state {}: non-finite entry", s + 1));
        }
    }

    violations
}

/// Reorder states into the canonical severity order, resolving label switching.
///
/// States are scored by P(ED) + P(Hosp) under the emission model with the
/// previous event fixed at GP and sorted ascending; ties within 1e-9 break by
/// P(Spec) ascending. Returns the permutation (`perm[i]` is the original index
/// of the state placed at position `i`) together with the reordered parameters.
/// The model likelihood is invariant under this relabeling.
pub fn canonical_state_order(params: &ModelParameters) -> (Vec<usize>, ModelParameters) {
    let x = encode_covariates(None);
    let mut keys: Vec<(usize, f64, f64)> = (0..params.n_states())
        .map(|s| {
            let p = emission_probs(params.beta.for_state(s), &x);
            (
                s,
                p[EventCode::Ed.index()] + p[EventCode::Hosp.index()],
                p[EventCode::Spec.index()],
            )
        })
        .collect();
    keys.sort_by(|a, b| {
        if (a.1 - b.1).abs() <= 1e-9 {
            a.2.total_cmp(&b.2)
        } else {
            a.1.total_cmp(&b.1)
        }
    });
    let perm: Vec<usize> = keys.iter().map(|k| k.0).collect();
    let reordered = permute_states(params, &perm);
    (perm, reordered)
}

/// Apply a state permutation consistently to all three parameter blocks.
/// `perm[i]` names the original state placed at new position `i`.
pub fn permute_states(params: &ModelParameters, perm: &[usize]) -> ModelParameters {
    let n = params.n_states();
    assert_eq!(perm.len(), n, "permutation length must match state count");

    let pi = Array1::from_iter(perm.iter().map(|&s| params.pi[s]));

    let mut q = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            q[[i, j]] = params.q.rate(perm[i], perm[j]);
        }
    }

    let beta = EmissionCoefficients::from_raw(
        perm.iter()
            .map(|&s| params.beta.for_state(s).clone())
            .collect(),
    );

    ModelParameters {
        pi,
        q: GeneratorMatrix::from_raw(q),
        beta,
    }
}
