//! Per-state autoregressive multinomial emission model: covariate encoding,
//! emission probabilities, the weighted M-step fit, and the log-odds inversion
//! that turns a probability table into coefficients.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{EventCode, N_COVARIATES, N_EVENTS, N_LOGITS};

/// Covariate vector of one observation: intercept plus a one-hot encoding of
/// the previous non-GP event. GP (or an absent previous event) is the
/// reference pattern (1, 0, 0, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateVector([f64; N_COVARIATES]);

impl CovariateVector {
    pub fn values(&self) -> &[f64; N_COVARIATES] {
        &self.0
    }

    /// Which of the four covariate patterns this is: 0 GP/absent, 1 ED,
    /// 2 Hosp, 3 Spec. Matches [`EventCode::index`] of the previous event.
    pub fn pattern_index(&self) -> usize {
        self.0[1..]
            .iter()
            .position(|&v| v == 1.0)
            .map(|i| i + 1)
            .unwrap_or(0)
    }
}

/// Encode the previous observed event. The first observation of a timeline has
/// no previous event and is encoded as the reference pattern.
pub fn encode_covariates(prev_event: Option<EventCode>) -> CovariateVector {
    let mut x = [0.0; N_COVARIATES];
    x[0] = 1.0;
    match prev_event {
        Some(EventCode::Ed) => x[1] = 1.0,
        Some(EventCode::Hosp) => x[2] = 1.0,
        Some(EventCode::Spec) => x[3] = 1.0,
        Some(EventCode::Gp) | None => {}
    }
    CovariateVector(x)
}

/// The covariate vector for a pattern index (inverse of
/// [`CovariateVector::pattern_index`]).
pub fn covariates_for_pattern(pattern: usize) -> CovariateVector {
    encode_covariates(EventCode::from_index(pattern).filter(|_| pattern > 0))
}

/// Emission probabilities over (GP, ED, Hosp, Spec) for one state.
///
/// Softmax over logits (0, beta_ED . x, beta_Hosp . x, beta_Spec . x) with
/// max-logit subtraction; entries are strictly positive and sum to one.
pub fn emission_probs(beta_state: &Array2<f64>, x: &CovariateVector) -> [f64; N_EVENTS] {
    let xv = x.values();
    let mut logits = [0.0; N_EVENTS];
    for k in 0..N_LOGITS {
        let mut u = 0.0;
        for (p, &xp) in xv.iter().enumerate() {
            u += beta_state[[k, p]] * xp;
        }
        logits[k + 1] = u;
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs = logits.map(|u| (u - max).exp());
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    probs
}

/// One observation weighted by its posterior probability of state membership.
#[derive(Debug, Clone, Copy)]
pub struct WeightedEmissionSample {
    pub covariates: CovariateVector,
    pub outcome: EventCode,
    pub weight: f64,
}

/// Fit one state's coefficient block by weighted multinomial maximum
/// likelihood with a small ridge penalty.
///
/// Newton-Raphson on the full coefficient vector with step halving; converged
/// when the gradient max-norm drops to 1e-8 or after 100 iterations. The
/// returned flag reports which. The ridge keeps the fit finite under
/// quasi-separation (covariate patterns with a single observed outcome).
pub fn fit_weighted_multinomial(
    samples: &[WeightedEmissionSample],
    ridge: f64,
) -> Result<(Array2<f64>, bool)> {
    let mut table = [[0.0; N_EVENTS]; N_EVENTS];
    let mut total = 0.0;
    for s in samples {
        if s.weight.is_nan() || s.weight < 0.0 {
            return Err(Error::Estimation(format!(
                "emission sample weight {} must be nonnegative",
                s.weight
            )));
        }
        table[s.covariates.pattern_index()][s.outcome.index()] += s.weight;
        total += s.weight;
    }
    if total <= 0.0 {
        return Err(Error::Estimation(
            "emission fit needs positive total weight".into(),
        ));
    }
    fit_weighted_table(&table, ridge)
}

/// Newton fit on the pattern-by-outcome weight table. The four covariate
/// patterns are the sufficient statistics of the model, so the cost is
/// independent of the number of samples.
pub(crate) fn fit_weighted_table(
    table: &[[f64; N_EVENTS]; N_EVENTS],
    ridge: f64,
) -> Result<(Array2<f64>, bool)> {
    const MAX_ITER: usize = 100;
    const GRAD_TOL: f64 = 1e-8;
    let n_params = N_LOGITS * N_COVARIATES;

    let patterns: Vec<CovariateVector> = (0..N_EVENTS).map(covariates_for_pattern).collect();
    let row_totals: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();

    let penalized_ll = |beta: &Array2<f64>| -> f64 {
        let mut ll = 0.0;
        for (p, row) in table.iter().enumerate() {
            if row_totals[p] == 0.0 {
                continue;
            }
            let probs = emission_probs(beta, &patterns[p]);
            for (k, &w) in row.iter().enumerate() {
                if w > 0.0 {
                    ll += w * probs[k].ln();
                }
            }
        }
        ll - 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>()
    };

    let mut beta = Array2::<f64>::zeros((N_LOGITS, N_COVARIATES));
    let mut ll = penalized_ll(&beta);

    for _ in 0..MAX_ITER {
        let probs: Vec<[f64; N_EVENTS]> = patterns
            .iter()
            .map(|x| emission_probs(&beta, x))
            .collect();

        // Gradient of the penalized weighted log-likelihood.
        let mut grad = vec![0.0; n_params];
        for k in 0..N_LOGITS {
            for pc in 0..N_COVARIATES {
                let mut g = 0.0;
                for p in 0..N_EVENTS {
                    if row_totals[p] == 0.0 {
                        continue;
                    }
                    let xp = patterns[p].values()[pc];
                    if xp != 0.0 {
                        g += xp * (table[p][k + 1] - row_totals[p] * probs[p][k + 1]);
                    }
                }
                grad[k * N_COVARIATES + pc] = g - ridge * beta[[k, pc]];
            }
        }

        let grad_max = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if grad_max <= GRAD_TOL {
            return Ok((beta, true));
        }

        // Negated Hessian (positive definite thanks to the ridge).
        let mut neg_hess = Array2::<f64>::zeros((n_params, n_params));
        for p in 0..N_EVENTS {
            if row_totals[p] == 0.0 {
                continue;
            }
            let xv = patterns[p].values();
            for k1 in 0..N_LOGITS {
                for k2 in 0..N_LOGITS {
                    let w = row_totals[p]
                        * probs[p][k1 + 1]
                        * (if k1 == k2 { 1.0 } else { 0.0 } - probs[p][k2 + 1]);
                    if w == 0.0 {
                        continue;
                    }
                    for pc1 in 0..N_COVARIATES {
                        if xv[pc1] == 0.0 {
                            continue;
                        }
                        for pc2 in 0..N_COVARIATES {
                            if xv[pc2] == 0.0 {
                                continue;
                            }
                            neg_hess[[k1 * N_COVARIATES + pc1, k2 * N_COVARIATES + pc2]] +=
                                w * xv[pc1] * xv[pc2];
                        }
                    }
                }
            }
        }
        for d in 0..n_params {
            neg_hess[[d, d]] += ridge;
        }

        let grad_col = Array2::from_shape_fn((n_params, 1), |(i, _)| grad[i]);
        let step = linalg::solve(&neg_hess, &grad_col)?;

        // Step halving: Newton on a concave objective, so a short enough step
        // always improves.
        let mut scale = 1.0;
        loop {
            let mut candidate = beta.clone();
            for k in 0..N_LOGITS {
                for pc in 0..N_COVARIATES {
                    candidate[[k, pc]] += scale * step[[k * N_COVARIATES + pc, 0]];
                }
            }
            let candidate_ll = penalized_ll(&candidate);
            if candidate_ll >= ll - 1e-12 || scale < 1e-12 {
                beta = candidate;
                ll = candidate_ll;
                break;
            }
            scale *= 0.5;
        }
    }

    Ok((beta, false))
}

/// Exact inversion of a 4x4 probability table (rows: previous event; columns:
/// outcome) into one state's coefficient block.
///
/// Intercepts come from the GP row's log-odds against GP; indicator
/// coefficients are log-odds differences between rows. Composing with
/// [`emission_probs`] reproduces the table (after row normalization) to
/// machine precision.
pub fn log_odds_to_beta(table: &[[f64; N_EVENTS]; N_EVENTS]) -> Result<Array2<f64>> {
    for (p, row) in table.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Numerical(format!(
                    "probability table entry [{p},{k}] = {v}: log-odds need strictly positive entries"
                )));
            }
        }
    }
    let mut beta = Array2::<f64>::zeros((N_LOGITS, N_COVARIATES));
    for k in 0..N_LOGITS {
        let intercept = (table[0][k + 1] / table[0][0]).ln();
        beta[[k, 0]] = intercept;
        for p in 1..N_EVENTS {
            beta[[k, p]] = (table[p][k + 1] / table[p][0]).ln() - intercept;
        }
    }
    Ok(beta)
}
