//! Matrix-exponential numerics: transition kernels exp(Q dt), Van Loan block
//! integrals for endpoint-conditioned expectations, and per-iteration caches
//! keyed by interval length.
//!
//! The exponential uses scaling-and-squaring with a Padé(13) approximant
//! (Higham 2005). Padé is preferred over eigendecomposition because generator
//! iterates produced by EM can be defective or near-defective.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GeneratorMatrix;

/// Padé(13) numerator coefficients.
const PADE_B: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Largest 1-norm handled without scaling (Higham, Table 10.2).
const PADE_THETA_13: f64 = 5.371_920_351_148_152;

/// Roundoff clipping threshold for kernel and integral entries; anything more
/// negative than this indicates numerical failure rather than roundoff.
const CLIP_TOL: f64 = 1e-12;

fn one_norm(a: &Array2<f64>) -> f64 {
    let mut max = 0.0f64;
    for j in 0..a.ncols() {
        let mut col = 0.0;
        for i in 0..a.nrows() {
            col += a[[i, j]].abs();
        }
        max = max.max(col);
    }
    max
}

/// Matrix exponential exp(A) by scaling-and-squaring with Padé(13).
pub fn matrix_exp(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Numerical(
            "matrix_exp needs a nonempty square matrix".into(),
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix_exp: non-finite entry".into()));
    }

    let norm = one_norm(a);
    let squarings = if norm > PADE_THETA_13 {
        (norm / PADE_THETA_13).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut result = pade13(&scaled)?;
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    Ok(result)
}

fn pade13(a: &Array2<f64>) -> Result<Array2<f64>> {
    let eye = Array2::<f64>::eye(a.nrows());
    let a2 = a.dot(a);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let w1 = &a6 * PADE_B[13] + &a4 * PADE_B[11] + &a2 * PADE_B[9];
    let w2 = w1.dot(&a6) + &a6 * PADE_B[7] + &a4 * PADE_B[5] + &a2 * PADE_B[3] + &eye * PADE_B[1];
    let u = a.dot(&w2);

    let v1 = &a6 * PADE_B[12] + &a4 * PADE_B[10] + &a2 * PADE_B[8];
    let v = v1.dot(&a6) + &a6 * PADE_B[6] + &a4 * PADE_B[4] + &a2 * PADE_B[2] + &eye * PADE_B[0];

    // exp(A) ~ (V - U)^{-1} (V + U)
    linalg::solve(&(&v - &u), &(&v + &u))
}

/// Row-stochastic transition probability matrix P(dt) = exp(Q dt).
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    dt: f64,
    probs: Array2<f64>,
}

impl TransitionKernel {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.probs[[from, to]]
    }
}

/// Compute P(dt) = exp(Q dt), clipping roundoff negatives (magnitude at most
/// 1e-12) to zero and renormalizing rows to sum exactly to one.
pub fn transition_kernel(q: &GeneratorMatrix, dt: f64) -> Result<TransitionKernel> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::Data(format!(
            "transition kernel needs dt > 0, got {dt}; same-day events must be collapsed upstream"
        )));
    }
    let mut probs = matrix_exp(&(q.rates() * dt))?;
    for v in probs.iter_mut() {
        if *v < 0.0 {
            if *v < -CLIP_TOL {
                return Err(Error::Numerical(format!(
                    "transition kernel entry {v} at dt = {dt} is too negative to be roundoff"
                )));
            }
            *v = 0.0;
        }
    }
    for mut row in probs.rows_mut() {
        let sum: f64 = row.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numerical(format!(
                "transition kernel row sums to {sum} at dt = {dt}"
            )));
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(TransitionKernel { dt, probs })
}

/// The integral over an interval of length `dt` of exp(Q s) B exp(Q (dt - s))
/// for an indicator matrix B = e_k e_l^T.
///
/// Entry (a, b) is the unnormalized expected contribution of (state k time, or
/// k-to-l jumps) on paths from a to b.
#[derive(Debug, Clone)]
pub struct IntegralBlock {
    dt: f64,
    matrix: Array2<f64>,
}

impl IntegralBlock {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

/// Van Loan construction: exponentiate the 2N x 2N block matrix
/// [[Q, e_k e_l^T], [0, Q]] scaled by dt and read off the top-right block.
pub fn van_loan_integral(
    q: &GeneratorMatrix,
    dt: f64,
    k: usize,
    l: usize,
) -> Result<IntegralBlock> {
    let n = q.n_states();
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::Data(format!("van_loan_integral needs dt > 0, got {dt}")));
    }
    if k >= n || l >= n {
        return Err(Error::Numerical(format!(
            "van_loan_integral: state pair ({k},{l}) out of range for {n} states"
        )));
    }
    let matrix = van_loan_block(q.rates(), dt, k, l)?;
    Ok(IntegralBlock { dt, matrix })
}

fn van_loan_block(rates: &Array2<f64>, dt: f64, k: usize, l: usize) -> Result<Array2<f64>> {
    let n = rates.nrows();
    let mut big = Array2::<f64>::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            let v = rates[[i, j]] * dt;
            big[[i, j]] = v;
            big[[n + i, n + j]] = v;
        }
    }
    big[[k, n + l]] = dt;
    let e = matrix_exp(&big)?;
    let mut block = e.slice(s![..n, n..]).to_owned();
    for v in block.iter_mut() {
        if *v < 0.0 {
            if *v < -CLIP_TOL {
                return Err(Error::Numerical(format!(
                    "Van Loan integral entry {v} at dt = {dt} is too negative to be roundoff"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(block)
}

fn unique_dts(dts: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut seen = std::collections::HashSet::new();
    let mut unique = Vec::new();
    for dt in dts {
        if seen.insert(dt.to_bits()) {
            unique.push(dt);
        }
    }
    unique
}

/// Transition kernels precomputed for every distinct interval length of one
/// E-step sweep. Built once (in parallel), then shared read-only.
#[derive(Debug)]
pub struct KernelCache {
    map: HashMap<u64, TransitionKernel>,
}

impl KernelCache {
    pub fn build(q: &GeneratorMatrix, dts: impl IntoIterator<Item = f64>) -> Result<Self> {
        let unique = unique_dts(dts);
        let entries: Result<Vec<(u64, TransitionKernel)>> = unique
            .par_iter()
            .map(|&dt| transition_kernel(q, dt).map(|kernel| (dt.to_bits(), kernel)))
            .collect();
        Ok(Self {
            map: entries?.into_iter().collect(),
        })
    }

    pub fn get(&self, dt: f64) -> Option<&TransitionKernel> {
        self.map.get(&dt.to_bits())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Kernel plus the full set of Van Loan integrals for one interval length,
/// enough to evaluate every endpoint-conditioned sojourn and jump expectation.
#[derive(Debug)]
pub struct BridgeOps {
    n_states: usize,
    kernel: TransitionKernel,
    integrals: Vec<Array2<f64>>,
}

impl BridgeOps {
    fn build(q: &GeneratorMatrix, dt: f64) -> Result<Self> {
        let n = q.n_states();
        let kernel = transition_kernel(q, dt)?;
        let mut integrals = Vec::with_capacity(n * n);
        for k in 0..n {
            for l in 0..n {
                integrals.push(van_loan_block(q.rates(), dt, k, l)?);
            }
        }
        Ok(Self {
            n_states: n,
            kernel,
            integrals,
        })
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    /// Integral block for B = e_k e_l^T.
    pub fn integral(&self, k: usize, l: usize) -> &Array2<f64> {
        &self.integrals[k * self.n_states + l]
    }
}

/// [`BridgeOps`] for every distinct interval length, for the generator M-step.
#[derive(Debug)]
pub struct BridgeCache {
    map: HashMap<u64, BridgeOps>,
}

impl BridgeCache {
    pub fn build(q: &GeneratorMatrix, dts: impl IntoIterator<Item = f64>) -> Result<Self> {
        let unique = unique_dts(dts);
        let entries: Result<Vec<(u64, BridgeOps)>> = unique
            .par_iter()
            .map(|&dt| BridgeOps::build(q, dt).map(|ops| (dt.to_bits(), ops)))
            .collect();
        Ok(Self {
            map: entries?.into_iter().collect(),
        })
    }

    pub fn get(&self, dt: f64) -> Option<&BridgeOps> {
        self.map.get(&dt.to_bits())
    }
}
