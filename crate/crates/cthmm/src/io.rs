//! Data ingestion with the same-day severity rule, the plain-text parameter
//! and configuration formats, CSV report writers, and the command entry points
//! behind the CLI.
//!
//! File formats:
//! - Timeline CSV: header `patient_id,day,event`; `day` counts days since the
//!   patient's index date; `event` is one of GP, ED, Hosp, Spec.
//! - Truth CSV: header `patient_id,jump_time_years,state` (1-based states).
//! - Parameters file: a `pi:` line, a `Q:` block of N rows, and one
//!   `beta state <s>:` block of 3x4 coefficients per state; `#` comments.
//! - Run config: `key = value` lines with `#` comments; unknown keys are
//!   rejected to catch typos.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::emission::{covariates_for_pattern, emission_probs};
use crate::error::{Error, Result};
use crate::estimation::{em_fit, FitConfig, FitResult};
use crate::inference::{decode, state_occupancy, DecodedTimeline, OccupancyTable};
use crate::matexp::transition_kernel;
use crate::model::{
    canonical_state_order, EmissionCoefficients, EventCode, GeneratorMatrix, ModelParameters,
    Observation, PatientTimeline, DAYS_PER_YEAR, N_COVARIATES, N_LOGITS,
};
use crate::simulate::{sample_cohort, SimConfig, SimulatedPatient};

/// One raw ingestion record: a patient identifier, a day offset from the
/// patient's index date, and the observed event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEventRecord {
    pub patient_id: String,
    pub day: i64,
    pub event: EventCode,
}

/// Ingestion bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub n_records: usize,
    pub n_patients: usize,
    /// Records suppressed by the same-day severity rule.
    pub n_same_day_collapsed: usize,
    /// Patients dropped for having no retained events.
    pub n_patients_dropped: usize,
}

impl std::fmt::Display for IngestReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} records -> {} patients ({} same-day events collapsed, {} empty patients dropped)",
            self.n_records, self.n_patients, self.n_same_day_collapsed, self.n_patients_dropped
        )
    }
}

/// Group records by patient, collapse same-day events to the most severe one
/// (Hosp > ED > Spec > GP), convert days to years, and sort in time.
pub fn ingest(
    records: impl IntoIterator<Item = RawEventRecord>,
) -> Result<(Vec<PatientTimeline>, IngestReport)> {
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: std::collections::HashMap<String, std::collections::BTreeMap<i64, EventCode>> =
        std::collections::HashMap::new();
    let mut report = IngestReport::default();

    for record in records {
        if record.day < 0 {
            return Err(Error::Data(format!(
                "patient {}: negative day {}",
                record.patient_id, record.day
            )));
        }
        report.n_records += 1;
        let days = match by_patient.get_mut(&record.patient_id) {
            Some(days) => days,
            None => {
                order.push(record.patient_id.clone());
                by_patient.entry(record.patient_id.clone()).or_default()
            }
        };
        match days.entry(record.day) {
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert(record.event);
            }
            std::collections::btree_map::Entry::Occupied(mut slot) => {
                report.n_same_day_collapsed += 1;
                if record.event.severity() > slot.get().severity() {
                    slot.insert(record.event);
                }
            }
        }
    }

    let mut timelines = Vec::with_capacity(order.len());
    for patient_id in order {
        let days = by_patient.remove(&patient_id).expect("grouped above");
        if days.is_empty() {
            report.n_patients_dropped += 1;
            continue;
        }
        let observations = days
            .into_iter()
            .map(|(day, event)| Observation {
                time: day as f64 / DAYS_PER_YEAR,
                event,
            })
            .collect();
        timelines.push(PatientTimeline::new(patient_id, observations)?);
    }
    report.n_patients = timelines.len();
    Ok((timelines, report))
}

/// Parse the timeline CSV schema with line-numbered errors.
pub fn parse_timeline_csv(text: &str) -> Result<(Vec<PatientTimeline>, IngestReport)> {
    let mut records = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if idx == 0 {
            if line != "patient_id,day,event" {
                return Err(Error::data_at_line(
                    line_no,
                    format!("expected header 'patient_id,day,event', got '{line}'"),
                ));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::data_at_line(
                line_no,
                format!("expected 3 comma-separated fields, got {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::data_at_line(line_no, "empty patient_id"));
        }
        let day: i64 = fields[1]
            .parse()
            .map_err(|_| Error::data_at_line(line_no, format!("bad day '{}'", fields[1])))?;
        if day < 0 {
            return Err(Error::data_at_line(line_no, format!("negative day {day}")));
        }
        let event = EventCode::parse(fields[2]).ok_or_else(|| {
            Error::data_at_line(line_no, format!("unknown event code '{}'", fields[2]))
        })?;
        records.push(RawEventRecord {
            patient_id: fields[0].to_string(),
            day,
            event,
        });
    }
    ingest(records)
}

/// Read and parse a timeline CSV file.
pub fn read_timeline_csv(path: &Path) -> Result<(Vec<PatientTimeline>, IngestReport)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read data file {}: {e}", path.display())))?;
    parse_timeline_csv(&text)
}

/// Render timelines in the ingestion schema. Times are converted back to whole
/// days; the simulator quantizes to days up front, so this is lossless for
/// simulated cohorts.
pub fn timelines_to_csv(timelines: &[PatientTimeline]) -> String {
    let mut out = String::from("patient_id,day,event\n");
    for tl in timelines {
        for obs in tl.observations() {
            let day = (obs.time * DAYS_PER_YEAR).round() as i64;
            let _ = writeln!(out, "{},{day},{}", tl.patient_id(), obs.event);
        }
    }
    out
}

/// Render hidden trajectories: one row for the initial state at time zero and
/// one per jump, with 1-based states.
pub fn truth_to_csv(cohort: &[SimulatedPatient]) -> String {
    let mut out = String::from("patient_id,jump_time_years,state\n");
    for patient in cohort {
        let id = patient.timeline.patient_id();
        let _ = writeln!(out, "{id},0,{}", patient.trajectory.initial_state + 1);
        for &(t, s) in &patient.trajectory.jumps {
            let _ = writeln!(out, "{id},{t},{}", s + 1);
        }
    }
    out
}

/// Render a parameter set in the plain-text schema. Uses the shortest
/// round-tripping decimal form, so write/parse/write is byte-stable.
pub fn format_parameters(params: &ModelParameters) -> String {
    let n = params.n_states();
    let mut out = String::new();
    let _ = writeln!(out, "# cthmm model parameters");
    let _ = writeln!(out, "# states: {n}");
    let pi: Vec<String> = params.pi.iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "pi: {}", pi.join(" "));
    let _ = writeln!(out, "Q:");
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{}", params.q.rate(i, j))).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    for s in 0..n {
        let _ = writeln!(out, "beta state {}:", s + 1);
        let block = params.beta.for_state(s);
        for k in 0..N_LOGITS {
            let row: Vec<String> = (0..N_COVARIATES)
                .map(|p| format!("{}", block[[k, p]]))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

fn parse_float_row(line: &str, line_no: usize, expect: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::data_at_line(line_no, format!("bad number '{tok}'")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expect {
        return Err(Error::data_at_line(
            line_no,
            format!("expected {expect} numbers, got {}", values.len()),
        ));
    }
    Ok(values)
}

/// Parse the plain-text parameter schema.
pub fn parse_parameters(text: &str) -> Result<ModelParameters> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (line_no, pi_line) = lines
        .next()
        .ok_or_else(|| Error::Data("parameters file is empty".into()))?;
    let pi_body = pi_line
        .strip_prefix("pi:")
        .ok_or_else(|| Error::data_at_line(line_no, "expected 'pi:' line"))?;
    let pi_values: Vec<f64> = pi_body
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::data_at_line(line_no, format!("bad number '{tok}'")))
        })
        .collect::<Result<_>>()?;
    let n = pi_values.len();
    if n == 0 {
        return Err(Error::data_at_line(line_no, "pi has no entries"));
    }
    if pi_values.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::data_at_line(line_no, "pi entries must be nonnegative"));
    }
    let pi_sum: f64 = pi_values.iter().sum();
    if (pi_sum - 1.0).abs() > 1e-6 {
        return Err(Error::data_at_line(
            line_no,
            format!("pi sums to {pi_sum}, expected 1"),
        ));
    }
    let mut pi = Array1::from_vec(pi_values);
    if (pi_sum - 1.0).abs() > 1e-12 {
        pi.mapv_inplace(|v| v / pi_sum);
    }

    let (line_no, q_header) = lines
        .next()
        .ok_or_else(|| Error::Data("missing 'Q:' block".into()))?;
    if q_header != "Q:" {
        return Err(Error::data_at_line(line_no, "expected 'Q:' line"));
    }
    let mut off = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (line_no, row_line) = lines
            .next()
            .ok_or_else(|| Error::Data(format!("Q block ended before row {}", i + 1)))?;
        let row = parse_float_row(row_line, line_no, n)?;
        let mut row_sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            row_sum += v;
            if i != j {
                if v < 0.0 {
                    return Err(Error::data_at_line(
                        line_no,
                        format!("negative off-diagonal rate {v}"),
                    ));
                }
                off[[i, j]] = v;
            }
        }
        if row_sum.abs() > 1e-6 {
            return Err(Error::data_at_line(
                line_no,
                format!("Q row sums to {row_sum}, expected 0"),
            ));
        }
    }
    let q = GeneratorMatrix::from_off_diagonal(off)
        .map_err(|e| Error::Data(format!("bad generator: {e}")))?;

    let mut blocks = Vec::with_capacity(n);
    for s in 0..n {
        let expected = format!("beta state {}:", s + 1);
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::Data(format!("missing '{expected}' block")))?;
        if header != expected {
            return Err(Error::data_at_line(
                line_no,
                format!("expected '{expected}', got '{header}'"),
            ));
        }
        let mut block = Array2::<f64>::zeros((N_LOGITS, N_COVARIATES));
        for k in 0..N_LOGITS {
            let (line_no, row_line) = lines.next().ok_or_else(|| {
                Error::Data(format!("beta block for state {} ended early", s + 1))
            })?;
            let row = parse_float_row(row_line, line_no, N_COVARIATES)?;
            for (p, &v) in row.iter().enumerate() {
                block[[k, p]] = v;
            }
        }
        blocks.push(block);
    }

    if let Some((line_no, extra)) = lines.next() {
        return Err(Error::data_at_line(
            line_no,
            format!("unexpected trailing content '{extra}'"),
        ));
    }

    let beta = EmissionCoefficients::from_matrices(blocks)
        .map_err(|e| Error::Data(format!("bad coefficients: {e}")))?;
    ModelParameters::new(pi, q, beta).map_err(|e| Error::Data(format!("{e}")))
}

/// Read and parse a parameters file.
pub fn read_parameters(path: &Path) -> Result<ModelParameters> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read parameters file {}: {e}", path.display()))
    })?;
    parse_parameters(&text)
}

fn fmt_prob(v: f64, full_precision: bool) -> String {
    if full_precision {
        format!("{v}")
    } else {
        format!("{v:.2}")
    }
}

/// Emission probability table: rows by previous event, twelve columns of
/// outcome-by-state probabilities (states in the order of `params`).
/// Two-decimal cells by default.
pub fn emission_table_csv(params: &ModelParameters, full_precision: bool) -> String {
    let n = params.n_states();
    let mut out = String::from("prev_event");
    for s in 0..n {
        for e in EventCode::ALL {
            let _ = write!(out, ",state{}_{}", s + 1, e);
        }
    }
    out.push('\n');
    for prev in EventCode::ALL {
        let _ = write!(out, "{prev}");
        let x = covariates_for_pattern(prev.index());
        for s in 0..n {
            let probs = emission_probs(params.beta.for_state(s), &x);
            for e in EventCode::ALL {
                let _ = write!(out, ",{}", fmt_prob(probs[e.index()], full_precision));
            }
        }
        out.push('\n');
    }
    out
}

/// Long-format occupancy curves for plotting: one row per
/// (start_state, time, state) with 1-based states.
pub fn occupancy_csv(table: &OccupancyTable) -> String {
    let mut out = String::from("start_state,t,state,probability\n");
    for (t, matrix) in table.times.iter().zip(&table.matrices) {
        let n = matrix.nrows();
        for start in 0..n {
            for state in 0..n {
                let _ = writeln!(
                    out,
                    "{},{t},{},{}",
                    start + 1,
                    state + 1,
                    matrix[[start, state]]
                );
            }
        }
    }
    out
}

/// The full transition probability matrix over `horizon` years, printed at
/// full precision.
pub fn transition_summary(q: &GeneratorMatrix, horizon: f64) -> Result<String> {
    let kernel = transition_kernel(q, horizon)?;
    let n = q.n_states();
    let mut out = String::new();
    let _ = writeln!(out, "transition probabilities over {horizon} years:");
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{}", kernel.prob(i, j))).collect();
        let _ = writeln!(out, "from state {}: {}", i + 1, row.join(" "));
    }
    Ok(out)
}

/// Decoded timelines: per-observation posteriors and the most probable state.
pub fn decoded_csv(decoded: &[DecodedTimeline], n_states: usize) -> String {
    let mut out = String::from("patient_id,time,event");
    for s in 0..n_states {
        let _ = write!(out, ",gamma_{}", s + 1);
    }
    out.push_str(",argmax_state\n");
    for tl in decoded {
        for point in &tl.points {
            let _ = write!(out, "{},{},{}", tl.patient_id, point.time, point.event);
            for s in 0..n_states {
                let _ = write!(out, ",{}", point.gamma[s]);
            }
            let _ = writeln!(out, ",{}", point.state + 1);
        }
    }
    out
}

/// Per-iteration log-likelihood trace.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,log_likelihood\n");
    for (i, ll) in trace.iter().enumerate() {
        let _ = writeln!(out, "{i},{ll}");
    }
    out
}

/// Human-readable fit summary.
pub fn fit_report(fit: &FitResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "converged: {} after {} iterations (final parameter delta {:.6})",
        fit.converged, fit.n_iterations, fit.final_delta
    );
    let _ = writeln!(
        out,
        "final log-likelihood: {:.6} (restart {} won)",
        fit.log_likelihood_trace.last().copied().unwrap_or(f64::NAN),
        fit.restart_index + 1
    );
    if fit.warnings.is_empty() {
        let _ = writeln!(out, "warnings: none");
    } else {
        let _ = writeln!(out, "warnings:");
        for w in &fit.warnings {
            let _ = writeln!(out, "  - {w}");
        }
    }
    let pi: Vec<String> = fit.params.pi.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(out, "pi: {}", pi.join(" "));
    let _ = writeln!(out, "Q:");
    let n = fit.params.n_states();
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| format!("{:.4}", fit.params.q.rate(i, j)))
            .collect();
        let _ = writeln!(out, "  {}", row.join(" "));
    }
    let _ = writeln!(out, "emission probabilities (two decimals):");
    for line in emission_table_csv(&fit.params, false).lines() {
        let _ = writeln!(out, "  {line}");
    }
    out
}

/// Run configuration: a `key = value` file mirroring the fit and simulation
/// settings plus input/output paths. Unknown keys are rejected.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub states: usize,
    pub seed: u64,
    pub threshold: f64,
    pub max_iterations: usize,
    pub inner_q_iterations: usize,
    pub restarts: usize,
    pub ridge: f64,
    pub n_patients: usize,
    pub observation_rate: f64,
    pub horizon: f64,
    pub include_t0: bool,
    pub grid_step: f64,
    pub full_precision: bool,
    pub data: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub truth_out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            states: 3,
            seed: 0,
            threshold: 0.05,
            max_iterations: 500,
            inner_q_iterations: 1,
            restarts: 5,
            ridge: 1e-8,
            n_patients: 100,
            observation_rate: 3.0,
            horizon: 5.0,
            include_t0: true,
            grid_step: 0.25,
            full_precision: false,
            data: None,
            params: None,
            out: None,
            truth_out: None,
            trace_out: None,
            report_out: None,
        }
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key '{key}'"
                )));
            }
            let bad = |what: &str| {
                Error::Config(format!("line {line_no}: bad {what} value '{value}' for '{key}'"))
            };
            match key {
                "states" => config.states = value.parse().map_err(|_| bad("integer"))?,
                "seed" => config.seed = value.parse().map_err(|_| bad("integer"))?,
                "threshold" => config.threshold = value.parse().map_err(|_| bad("number"))?,
                "max_iterations" => {
                    config.max_iterations = value.parse().map_err(|_| bad("integer"))?
                }
                "inner_q_iterations" => {
                    config.inner_q_iterations = value.parse().map_err(|_| bad("integer"))?
                }
                "restarts" => config.restarts = value.parse().map_err(|_| bad("integer"))?,
                "ridge" => config.ridge = value.parse().map_err(|_| bad("number"))?,
                "n_patients" => config.n_patients = value.parse().map_err(|_| bad("integer"))?,
                "observation_rate" => {
                    config.observation_rate = value.parse().map_err(|_| bad("number"))?
                }
                "horizon" => config.horizon = value.parse().map_err(|_| bad("number"))?,
                "include_t0" => {
                    config.include_t0 = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(bad("boolean")),
                    }
                }
                "grid_step" => config.grid_step = value.parse().map_err(|_| bad("number"))?,
                "full_precision" => {
                    config.full_precision = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(bad("boolean")),
                    }
                }
                "data" => config.data = Some(PathBuf::from(value)),
                "params" => config.params = Some(PathBuf::from(value)),
                "out" => config.out = Some(PathBuf::from(value)),
                "truth_out" => config.truth_out = Some(PathBuf::from(value)),
                "trace_out" => config.trace_out = Some(PathBuf::from(value)),
                "report_out" => config.report_out = Some(PathBuf::from(value)),
                _ => {
                    return Err(Error::Config(format!(
                        "line {line_no}: unknown config key '{key}'"
                    )))
                }
            }
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::parse_str(&text)
    }

    /// Apply CLI overrides on top of the file values.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        states: Option<usize>,
        horizon: Option<f64>,
        out: Option<PathBuf>,
    ) {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(states) = states {
            self.states = states;
        }
        if let Some(horizon) = horizon {
            self.horizon = horizon;
        }
        if let Some(out) = out {
            self.out = Some(out);
        }
    }

    fn require(&self, field: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        field
            .clone()
            .ok_or_else(|| Error::Config(format!("missing required config key '{key}'")))
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            n_states: self.states,
            convergence_threshold: self.threshold,
            max_outer_iterations: self.max_iterations,
            inner_q_iterations: self.inner_q_iterations,
            restarts: self.restarts,
            rng_seed: self.seed,
            ridge: self.ridge,
        }
    }
}

fn derive_path(base: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", base.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Sample a synthetic cohort from a parameters file and write it in the
/// ingestion schema, plus the hidden-state truth when `truth_out` is set.
pub fn cmd_simulate(config: &RunConfig) -> Result<()> {
    let params_path = config.require(&config.params, "params")?;
    let out = config.require(&config.out, "out")?;
    let params = read_parameters(&params_path)?;
    let sim = SimConfig {
        params,
        n_patients: config.n_patients,
        observation_rate: config.observation_rate,
        horizon_years: config.horizon,
        rng_seed: config.seed,
        include_t0_observation: config.include_t0,
    };
    let cohort = sample_cohort(&sim)?;
    let timelines: Vec<PatientTimeline> = cohort.iter().map(|p| p.timeline.clone()).collect();
    write_file(&out, &timelines_to_csv(&timelines))?;
    if let Some(truth_out) = &config.truth_out {
        write_file(truth_out, &truth_to_csv(&cohort))?;
    }
    let n_obs: usize = timelines.iter().map(|tl| tl.n_observations()).sum();
    println!(
        "simulated {} patients ({n_obs} observations) -> {}",
        cohort.len(),
        out.display()
    );
    Ok(())
}

/// Fit by EM and write the canonical parameters, the log-likelihood trace, and
/// a human-readable report.
pub fn cmd_fit(config: &RunConfig) -> Result<()> {
    let data = config.require(&config.data, "data")?;
    let out = config.require(&config.out, "out")?;
    let (timelines, ingest_report) = read_timeline_csv(&data)?;
    println!("ingested: {ingest_report}");
    if timelines.is_empty() {
        return Err(Error::Data("no patients to fit".into()));
    }
    let fit = em_fit(&timelines, &config.fit_config())?;
    write_file(&out, &format_parameters(&fit.params))?;
    let trace_out = config
        .trace_out
        .clone()
        .unwrap_or_else(|| derive_path(&out, ".trace.csv"));
    write_file(&trace_out, &trace_csv(&fit.log_likelihood_trace))?;
    let report_out = config
        .report_out
        .clone()
        .unwrap_or_else(|| derive_path(&out, ".report.txt"));
    let report = fit_report(&fit);
    write_file(&report_out, &report)?;
    print!("{report}");
    println!("parameters -> {}", out.display());
    Ok(())
}

/// Decode timelines at fixed parameters: per-observation posteriors and the
/// most probable state, in input order.
pub fn cmd_decode(config: &RunConfig) -> Result<()> {
    let params_path = config.require(&config.params, "params")?;
    let data = config.require(&config.data, "data")?;
    let out = config.require(&config.out, "out")?;
    let (_, params) = canonical_state_order(&read_parameters(&params_path)?);
    let (timelines, _) = read_timeline_csv(&data)?;
    let decoded: Vec<DecodedTimeline> = timelines
        .iter()
        .map(|tl| decode(tl, &params))
        .collect::<Result<_>>()?;
    write_file(&out, &decoded_csv(&decoded, params.n_states()))?;
    println!("decoded {} patients -> {}", decoded.len(), out.display());
    Ok(())
}

/// Occupancy curves on a grid plus the transition matrix over the horizon.
pub fn cmd_occupancy(config: &RunConfig) -> Result<()> {
    let params_path = config.require(&config.params, "params")?;
    let out = config.require(&config.out, "out")?;
    let (_, params) = canonical_state_order(&read_parameters(&params_path)?);
    let table = state_occupancy(&params.q, config.horizon, config.grid_step)?;
    write_file(&out, &occupancy_csv(&table))?;
    print!("{}", transition_summary(&params.q, config.horizon)?);
    println!("occupancy grid -> {}", out.display());
    Ok(())
}

/// Emission probability table by state and previous event, in canonical state
/// order.
pub fn cmd_report_emissions(config: &RunConfig) -> Result<()> {
    let params_path = config.require(&config.params, "params")?;
    let out = config.require(&config.out, "out")?;
    let (_, params) = canonical_state_order(&read_parameters(&params_path)?);
    write_file(&out, &emission_table_csv(&params, config.full_precision))?;
    println!("emission table -> {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::simulate::sample_cohort;

    #[test]
    fn same_day_events_collapse_to_the_most_severe() {
        let records = vec![
            RawEventRecord {
                patient_id: "a".into(),
                day: 10,
                event: EventCode::Gp,
            },
            RawEventRecord {
                patient_id: "a".into(),
                day: 10,
                event: EventCode::Ed,
            },
        ];
        let (timelines, report) = ingest(records).unwrap();
        assert_eq!(timelines.len(), 1);
        let obs = timelines[0].observations();
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].event, EventCode::Ed);
        assert!((obs[0].time - 10.0 / DAYS_PER_YEAR).abs() < 1e-15);
        assert_eq!(report.n_same_day_collapsed, 1);
    }

    #[test]
    fn severity_rule_keeps_hospitalization_over_specialist() {
        let mk = |day, event| RawEventRecord {
            patient_id: "p".into(),
            day,
            event,
        };
        let records = vec![
            mk(0, EventCode::Gp),
            mk(30, EventCode::Spec),
            mk(30, EventCode::Hosp),
            mk(400, EventCode::Gp),
        ];
        let (timelines, _) = ingest(records).unwrap();
        let obs = timelines[0].observations();
        assert_eq!(obs.len(), 3);
        let times: Vec<f64> = obs.iter().map(|o| o.time).collect();
        assert!((times[0] - 0.0).abs() < 1e-15);
        assert!((times[1] - 30.0 / DAYS_PER_YEAR).abs() < 1e-15);
        assert!((times[2] - 400.0 / DAYS_PER_YEAR).abs() < 1e-15);
        assert_eq!(obs[1].event, EventCode::Hosp);
    }

    #[test]
    fn ingest_handles_unsorted_input_and_preserves_patient_order() {
        let mk = |id: &str, day| RawEventRecord {
            patient_id: id.into(),
            day,
            event: EventCode::Gp,
        };
        let records = vec![mk("z", 100), mk("a", 5), mk("z", 3), mk("a", 50)];
        let (timelines, _) = ingest(records).unwrap();
        assert_eq!(timelines[0].patient_id(), "z");
        assert_eq!(timelines[1].patient_id(), "a");
        let times: Vec<f64> = timelines[0].observations().iter().map(|o| o.time).collect();
        assert!(times[0] < times[1]);
    }

    #[test]
    fn empty_input_yields_an_empty_cohort() {
        let (timelines, report) = parse_timeline_csv("").unwrap();
        assert!(timelines.is_empty());
        assert_eq!(report.n_patients, 0);
        let (timelines, _) = parse_timeline_csv("patient_id,day,event\n").unwrap();
        assert!(timelines.is_empty());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "patient_id,day,event\np1,0,GP\np1,10,XX\n";
        let err = parse_timeline_csv(text).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(err.to_string().contains("XX"));

        let text = "patient_id,day,event\np1,-4,GP\n";
        let err = parse_timeline_csv(text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("negative"));

        let text = "patient_id,day,event\np1,0\n";
        let err = parse_timeline_csv(text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let text = "wrong,header,here\n";
        let err = parse_timeline_csv(text).unwrap_err();
        assert!(err.to_string().contains("header"));
    }

    #[test]
    fn simulated_cohorts_round_trip_through_the_csv_schema() {
        let cohort = sample_cohort(&crate::simulate::SimConfig {
            params: presets::demo_parameters(),
            n_patients: 25,
            observation_rate: 4.0,
            horizon_years: 3.0,
            rng_seed: 31,
            include_t0_observation: true,
        })
        .unwrap();
        let timelines: Vec<PatientTimeline> = cohort.iter().map(|p| p.timeline.clone()).collect();
        let csv = timelines_to_csv(&timelines);
        let (reread, report) = parse_timeline_csv(&csv).unwrap();
        assert_eq!(report.n_same_day_collapsed, 0);
        assert_eq!(reread, timelines);
    }

    #[test]
    fn parameters_round_trip_bit_exactly() {
        let params = presets::demo_parameters();
        let text = format_parameters(&params);
        let parsed = parse_parameters(&text).unwrap();
        assert_eq!(parsed, params);
        assert_eq!(format_parameters(&parsed), text);
    }

    #[test]
    fn parameter_parser_rejects_bad_blocks() {
        let params = presets::demo_parameters();
        let good = format_parameters(&params);

        let bad = good.replace("pi: ", "pie: ");
        assert!(parse_parameters(&bad).is_err());

        // Negative off-diagonal rate.
        let bad = good.replace("0.08 0.03", "-0.08 0.19");
        assert!(parse_parameters(&bad).is_err());

        // Trailing junk.
        let bad = format!("{good}\nleftover\n");
        assert!(parse_parameters(&bad).is_err());

        assert!(parse_parameters("").is_err());
    }

    #[test]
    fn zero_coefficients_report_uniform_cells() {
        let params = ModelParameters::new(
            Array1::from_elem(3, 1.0 / 3.0),
            GeneratorMatrix::zero(3),
            EmissionCoefficients::zeros(3),
        )
        .unwrap();
        let csv = emission_table_csv(&params, false);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("prev_event,state1_GP,state1_ED"));
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 13);
            assert!(cells[1..].iter().all(|&c| c == "0.25"), "{line}");
        }
    }

    #[test]
    fn emission_report_is_invariant_under_state_relabeling() {
        use crate::model::{canonical_state_order, permute_states};
        let params = presets::demo_parameters();
        let reference = emission_table_csv(&params, false);
        for perm in [[1usize, 2, 0], [2, 1, 0], [0, 2, 1]] {
            let permuted = permute_states(&params, &perm);
            let (_, canonical) = canonical_state_order(&permuted);
            assert_eq!(emission_table_csv(&canonical, false), reference);
        }
    }

    #[test]
    fn run_config_parses_values_and_rejects_unknown_keys() {
        let text = "\n# comment\nstates = 4\nseed = 11\nobservation_rate = 2.5\n\
                    data = in.csv\nout = out.txt\ninclude_t0 = false\n";
        let config = RunConfig::parse_str(text).unwrap();
        assert_eq!(config.states, 4);
        assert_eq!(config.seed, 11);
        assert!((config.observation_rate - 2.5).abs() < 1e-15);
        assert!(!config.include_t0);
        assert_eq!(config.data.as_deref(), Some(Path::new("in.csv")));
        assert_eq!(config.restarts, 5); // default survives

        let err = RunConfig::parse_str("stattes = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key"), "{err}");
        assert!(err.to_string().contains("line 1"));

        let err = RunConfig::parse_str("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let err = RunConfig::parse_str("states = many\n").unwrap_err();
        assert!(err.to_string().contains("bad integer"), "{err}");

        assert!(matches!(
            RunConfig::parse_str("just a line\n").unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn truth_csv_lists_initial_state_and_jumps() {
        let cohort = sample_cohort(&crate::simulate::SimConfig {
            params: presets::demo_parameters(),
            n_patients: 3,
            observation_rate: 2.0,
            horizon_years: 10.0,
            rng_seed: 77,
            include_t0_observation: true,
        })
        .unwrap();
        let csv = truth_to_csv(&cohort);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "patient_id,jump_time_years,state");
        let n_rows = lines.count();
        let expected: usize = cohort.iter().map(|p| 1 + p.trajectory.jumps.len()).sum();
        assert_eq!(n_rows, expected);
    }

    #[test]
    fn trace_csv_is_indexed_from_zero() {
        let csv = trace_csv(&[-10.0, -8.5, -8.4]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iteration,log_likelihood");
        assert_eq!(lines[1], "0,-10");
        assert_eq!(lines[3], "2,-8.4");
    }
}
