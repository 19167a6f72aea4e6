//! Closed-loop simulation of one phase under a chosen current controller,
//! with tracking metrics and trace export.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gain::{AugState, PolicyGain, TrackingWeights};
use crate::plant::{self, InductanceSurface, MotorParams, PhaseState, ReferenceProfile};
use crate::qlearn::DataTuple;
use crate::scheduler::QCoreTable;

/// Currents above this multiple of the nominal current abort a run.
pub const SAFETY_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Controller {
    /// Bilinearly scheduled Q-cores.
    ScheduledQ,
    /// One fixed core of the table, for every angle and current.
    SingleQcore { row: usize, col: usize },
    /// Per-sample bang-bang rule with an optional dead band (A).
    DeltaModulation {
        #[serde(default)]
        band: f64,
    },
}

impl Controller {
    pub fn needs_table(&self) -> bool {
        !matches!(self, Controller::DeltaModulation { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Controller::ScheduledQ => "scheduled-q",
            Controller::SingleQcore { .. } => "single-qcore",
            Controller::DeltaModulation { .. } => "delta-modulation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Nominal motor; tables are matched against its fingerprint.
    pub motor: MotorParams,
    pub surface: InductanceSurface,
    pub reference: ReferenceProfile,
    pub controller: Controller,
    /// Number of samples.
    pub duration: u64,
    pub seed: u64,
    pub online_learning: bool,
    /// Uniform exploration noise amplitude (V), applied only while learning.
    pub dither: f64,
    /// Multiplier on the simulated plant's resistance (model mismatch).
    pub resistance_scale: f64,
    pub weights: TrackingWeights,
}

impl Scenario {
    /// Default reference, learning off, five electrical cycles.
    pub fn nominal(motor: MotorParams, surface: InductanceSurface, controller: Controller) -> Self {
        let cycles = 5;
        let duration = motor.steps_per_pitch().unwrap_or(1250) * cycles;
        Self {
            motor,
            surface,
            reference: ReferenceProfile::default(),
            controller,
            duration,
            seed: 0,
            online_learning: false,
            dither: 2.0,
            resistance_scale: 1.0,
            weights: TrackingWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.motor.validate()?;
        self.reference.validate(self.motor.rotor_pitch)?;
        if self.duration == 0 {
            return Err(Error::InvalidParams("scenario duration must be > 0".into()));
        }
        if !(self.dither.is_finite() && self.dither >= 0.0) {
            return Err(Error::InvalidParams(format!("dither must be >= 0, got {}", self.dither)));
        }
        if !(self.resistance_scale.is_finite() && self.resistance_scale > 0.0) {
            return Err(Error::InvalidParams(format!(
                "resistance scale must be > 0, got {}",
                self.resistance_scale
            )));
        }
        if (self.surface.period() - self.motor.rotor_pitch).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "surface spans {} deg but the rotor pitch is {} deg",
                self.surface.period(),
                self.motor.rotor_pitch
            )));
        }
        if let Controller::DeltaModulation { band } = self.controller {
            if !(band.is_finite() && band >= 0.0) {
                return Err(Error::InvalidParams(format!("delta band must be >= 0, got {band}")));
            }
        }
        Ok(())
    }

    /// Samples per electrical cycle (one rotor pitch).
    pub fn cycle_len(&self) -> u64 {
        self.motor
            .steps_per_pitch()
            .unwrap_or_else(|| (self.motor.rotor_pitch / self.motor.degrees_per_step()).round().max(1.0) as u64)
    }

    fn plant_params(&self) -> MotorParams {
        MotorParams {
            resistance: self.motor.resistance * self.resistance_scale,
            ..self.motor
        }
    }
}

/// One sample of a closed-loop run. Baseline runs record zero gains and no cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub k: u64,
    pub t_s: f64,
    pub theta_deg: f64,
    #[serde(rename = "r_A")]
    pub r_a: f64,
    #[serde(rename = "x_A")]
    pub x_a: f64,
    #[serde(rename = "u_V")]
    pub u_v: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    pub cell_row: Option<usize>,
    pub cell_col: Option<usize>,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: u64,
    pub online_updates: u64,
    pub rejected_updates: u64,
    pub scheduling_fallbacks: u64,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub records: Vec<SimRecord>,
    pub summary: TraceSummary,
}

/// A failed run, with whatever was simulated before the failure.
#[derive(Debug)]
pub struct SimFailure {
    pub error: Error,
    pub partial: Option<SimTrace>,
}

impl fmt::Display for SimFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.partial {
            Some(t) => write!(f, "{} (after {} recorded steps)", self.error, t.records.len()),
            None => self.error.fmt(f),
        }
    }
}

impl std::error::Error for SimFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for SimFailure {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

pub fn delta_modulation_step(x: f64, r: f64, v_dc: f64) -> f64 {
    banded_delta_step(x, r, v_dc, 0.0)
}

/// Bang-bang rule that applies zero volts while `|x − r| ≤ band`.
pub fn banded_delta_step(x: f64, r: f64, v_dc: f64, band: f64) -> f64 {
    if x < r - band {
        v_dc
    } else if x > r + band {
        -v_dc
    } else {
        0.0
    }
}

/// Runs a scenario. Table-based controllers need `table`; with online
/// learning on, the table is refined in place.
pub fn run_closed_loop(scenario: &Scenario, table: Option<&mut QCoreTable>) -> Result<SimTrace, SimFailure> {
    scenario.validate()?;
    let mut table = match (scenario.controller.needs_table(), table) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::InvalidParams(format!("the {} controller needs a trained table", scenario.controller.name())).into())
        }
        (true, Some(t)) => {
            check_table(scenario, t)?;
            Some(t)
        }
    };

    let params = scenario.plant_params();
    let v_dc = scenario.motor.v_dc;
    let bound = SAFETY_FACTOR * scenario.motor.i_nominal;
    let learning = scenario.online_learning && table.is_some();
    let fallbacks_before = table.as_ref().map_or(0, |t| t.fallback_count());
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut state = PhaseState::at_rest(0.0);
    let mut trace = SimTrace {
        records: Vec::with_capacity(scenario.duration as usize),
        summary: TraceSummary::default(),
    };

    for _ in 0..scenario.duration {
        let k = state.k;
        let r = scenario.reference.reference_at(state.theta, k);
        let aug = AugState::new(state.x, r);

        let (gain, cell) = match (&scenario.controller, table.as_deref()) {
            (Controller::ScheduledQ, Some(t)) => {
                let s = t.schedule(state.theta, state.x);
                (Some(s.gain), Some((s.location.row, s.location.col)))
            }
            (Controller::SingleQcore { row, col }, Some(t)) => (Some(*t.gain(*row, *col)), Some((*row, *col))),
            _ => (None, None),
        };
        let raw = match (gain, scenario.controller) {
            (Some(g), _) => {
                let noise = if learning && scenario.dither > 0.0 {
                    rng.random_range(-scenario.dither..=scenario.dither)
                } else {
                    0.0
                };
                g.control(&aug) + noise
            }
            (None, Controller::DeltaModulation { band }) => banded_delta_step(state.x, r, v_dc, band),
            (None, _) => unreachable!("table controllers always produce a gain"),
        };
        if !raw.is_finite() {
            return Err(abort(Error::NonFinite("control voltage"), trace, table.as_deref(), fallbacks_before));
        }
        let u = raw.clamp(-v_dc, v_dc);

        let next = match plant::step_phase(state, u, &params, &scenario.surface) {
            Ok(n) => n,
            Err(e) => return Err(abort(e, trace, table.as_deref(), fallbacks_before)),
        };
        let k_active = gain.unwrap_or_else(PolicyGain::zero);
        trace.records.push(SimRecord {
            k,
            t_s: k as f64 * params.sample_period,
            theta_deg: state.theta,
            r_a: r,
            x_a: state.x,
            u_v: u,
            k1: k_active.k_x(),
            k2: k_active.k_r(),
            cell_row: cell.map(|c| c.0),
            cell_col: cell.map(|c| c.1),
            cost: scenario.weights.stage_cost(&aug, u),
        });

        if !(next.x <= bound) {
            let err = Error::SafetyBound {
                step: k,
                current: next.x,
                bound,
            };
            return Err(abort(err, trace, table.as_deref(), fallbacks_before));
        }

        if learning {
            let r_next = scenario.reference.reference_at(next.theta, next.k);
            // Only transitions that stay on one reference level and off the
            // zero-current floor follow the local linear model.
            if r_next == r && next.x > 0.0 {
                let t = table.as_deref_mut().expect("learning implies a table");
                let (row, col) = match scenario.controller {
                    Controller::SingleQcore { row, col } => (row, col),
                    _ => t.nearest_index(&t.locate(state.theta, state.x)),
                };
                let policy = *t.gain(row, col);
                let tuple = DataTuple::from_transition(&aug, u, &AugState::new(next.x, r_next), &policy, &scenario.weights)
                    .map_err(|e| abort(e, trace.clone(), Some(&*t), fallbacks_before))?;
                let update = t.update_core_at(row, col, &tuple);
                if update.step_fraction > 0.0 {
                    trace.summary.online_updates += 1;
                } else {
                    trace.summary.rejected_updates += 1;
                }
            }
        }
        state = next;
    }
    finish(&mut trace, table.as_deref(), fallbacks_before);
    Ok(trace)
}

fn check_table(scenario: &Scenario, table: &QCoreTable) -> Result<()> {
    let expected = scenario.motor.fingerprint();
    if table.motor_fingerprint() != expected {
        return Err(Error::ParamsMismatch {
            expected,
            found: table.motor_fingerprint().to_string(),
        });
    }
    if (table.pitch() - scenario.motor.rotor_pitch).abs() > 1e-9 {
        return Err(Error::InvalidParams(format!(
            "table pitch {} deg does not match rotor pitch {} deg",
            table.pitch(),
            scenario.motor.rotor_pitch
        )));
    }
    if let Controller::SingleQcore { row, col } = scenario.controller {
        if row >= table.rows() || col >= table.cols() {
            return Err(Error::InvalidParams(format!(
                "core ({row}, {col}) outside the {}x{} table",
                table.rows(),
                table.cols()
            )));
        }
    }
    Ok(())
}

fn finish(trace: &mut SimTrace, table: Option<&QCoreTable>, fallbacks_before: u64) {
    trace.summary.steps = trace.records.len() as u64;
    trace.summary.scheduling_fallbacks = table.map_or(0, |t| t.fallback_count() - fallbacks_before);
}

fn abort(error: Error, mut trace: SimTrace, table: Option<&QCoreTable>, fallbacks_before: u64) -> SimFailure {
    finish(&mut trace, table, fallbacks_before);
    trace.summary.aborted = Some(error.to_string());
    SimFailure {
        error,
        partial: Some(trace),
    }
}

/// Runs independent scenarios in parallel, each on its own copy of `table`.
pub fn run_sweep(scenarios: &[Scenario], table: Option<&QCoreTable>) -> Vec<Result<SimTrace, SimFailure>> {
    scenarios
        .par_iter()
        .map(|s| {
            let mut own = table.cloned();
            run_closed_loop(s, own.as_mut())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Samples excluded after every reference transition.
    pub edge_guard: u64,
    /// Leading electrical cycles excluded from the aggregates.
    pub skip_cycles: u64,
    /// Settling band as a fraction of the segment amplitude.
    pub settle_band: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            edge_guard: 10,
            skip_cycles: 1,
            settle_band: 0.05,
        }
    }
}

/// One flat-reference stretch inside a conduction window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub cycle: u64,
    pub start_k: u64,
    /// One past the last sample.
    pub end_k: u64,
    pub amplitude: f64,
    pub rmse_a: f64,
    pub rmse_rel: f64,
    /// Peak-to-peak current after settling (or over the guarded stretch if
    /// the current never settles).
    pub ripple_a: f64,
    pub settling_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Conduction-window RMSE (A), aggregated over the segments that count.
    pub rmse_a: f64,
    /// RMSE over the RMS of the reference on the same samples.
    pub rmse_rel: f64,
    /// Largest steady ripple over the segments that count (A).
    pub ripple_a: f64,
    /// Largest settling time over the segments that count, if all settled.
    pub max_settling_steps: Option<u64>,
    /// Per cycle from the second on: mean `‖K(k) − K(k − cycle)‖` over window samples.
    pub mean_dk_per_cycle: Vec<f64>,
    pub samples: u64,
    pub segments: Vec<SegmentMetrics>,
}

impl Metrics {
    pub fn final_mean_dk(&self) -> Option<f64> {
        self.mean_dk_per_cycle.last().copied()
    }

    /// Worst relative RMSE over segments starting in cycles `[from, to)`.
    pub fn worst_rmse_rel_between(&self, from: u64, to: u64) -> Option<f64> {
        self.segments
            .iter()
            .filter(|s| s.cycle >= from && s.cycle < to)
            .map(|s| s.rmse_rel)
            .reduce(f64::max)
    }
}

/// Splits the trace into constant-reference runs inside the conduction window.
fn segments(records: &[SimRecord], reference: &ReferenceProfile) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, rec) in records.iter().enumerate() {
        let inside = reference.in_window(rec.theta_deg);
        match start {
            Some(s) if !inside || rec.r_a != records[s].r_a => {
                out.push((s, i));
                start = inside.then_some(i);
            }
            None if inside => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, records.len()));
    }
    out
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn compute_metrics(trace: &SimTrace, scenario: &Scenario, cfg: &MetricsConfig) -> Result<Metrics> {
    let recs = &trace.records;
    if recs.is_empty() {
        return Err(Error::InvalidParams("cannot compute metrics of an empty trace".into()));
    }
    let cycle_len = scenario.cycle_len();
    let first_counted = cfg.skip_cycles * cycle_len;
    let segs = segments(recs, &scenario.reference);
    if segs.is_empty() {
        return Err(Error::NoConductionWindow);
    }

    let mut out_segments = Vec::with_capacity(segs.len());
    let (mut sq_err, mut sq_ref, mut samples) = (0.0, 0.0, 0u64);
    let mut ripple = 0.0f64;
    let mut max_settle = Some(0u64);
    for &(s, e) in &segs {
        let amplitude = recs[s].r_a;
        let guarded = (s + cfg.edge_guard as usize).min(e);
        let body = &recs[guarded..e];
        let (se, sr) = body
            .iter()
            .fold((0.0, 0.0), |(a, b), r| (a + (r.x_a - r.r_a).powi(2), b + r.r_a * r.r_a));
        let rmse = if body.is_empty() { 0.0 } else { (se / body.len() as f64).sqrt() };
        let rms_ref = if body.is_empty() { 0.0 } else { (sr / body.len() as f64).sqrt() };

        let band = cfg.settle_band * amplitude;
        let settle_at = recs[s..e]
            .iter()
            .rposition(|r| (r.x_a - r.r_a).abs() >= band)
            .map_or(Some(s), |last_bad| (s + last_bad + 1 < e).then_some(s + last_bad + 1));
        let ripple_from = settle_at.unwrap_or(guarded).max(guarded);
        let ripple_a = peak_to_peak(recs[ripple_from.min(e)..e].iter().map(|r| r.x_a));
        let seg = SegmentMetrics {
            cycle: recs[s].k / cycle_len,
            start_k: recs[s].k,
            end_k: recs[e - 1].k + 1,
            amplitude,
            rmse_a: rmse,
            rmse_rel: ratio(rmse, rms_ref),
            ripple_a,
            settling_steps: settle_at.map(|i| (i - s) as u64),
        };
        if recs[s].k >= first_counted && !body.is_empty() {
            sq_err += se;
            sq_ref += sr;
            samples += body.len() as u64;
            ripple = ripple.max(ripple_a);
            max_settle = match (max_settle, seg.settling_steps) {
                (Some(a), Some(b)) => Some(a.max(b)),
                _ => None,
            };
        }
        out_segments.push(seg);
    }
    if samples == 0 {
        return Err(Error::NoConductionWindow);
    }
    let rmse_a = (sq_err / samples as f64).sqrt();
    let rms_ref = (sq_ref / samples as f64).sqrt();

    let mut mean_dk_per_cycle = Vec::new();
    let cl = cycle_len as usize;
    let cycles = recs.len().div_ceil(cl);
    for c in 1..cycles {
        let (mut total, mut n) = (0.0, 0usize);
        for i in c * cl..((c + 1) * cl).min(recs.len()) {
            if scenario.reference.in_window(recs[i].theta_deg) {
                let (a, b) = (&recs[i], &recs[i - cl]);
                total += (a.k1 - b.k1).hypot(a.k2 - b.k2);
                n += 1;
            }
        }
        if n > 0 {
            mean_dk_per_cycle.push(total / n as f64);
        }
    }

    Ok(Metrics {
        rmse_a,
        rmse_rel: ratio(rmse_a, rms_ref),
        ripple_a: ripple,
        max_settling_steps: max_settle,
        mean_dk_per_cycle,
        samples,
        segments: out_segments,
    })
}

fn peak_to_peak(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::Jsonl),
            other => Err(Error::InvalidParams(format!("unknown trace format {other:?} (expected csv or jsonl)"))),
        }
    }
}

impl TraceFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        }
    }
}

pub const CSV_HEADER: &str = "k,t_s,theta_deg,r_A,x_A,u_V,K1,K2,cell_row,cell_col,cost";

/// Writes the per-step records. CSV always starts with [`CSV_HEADER`].
pub fn export_trace(trace: &SimTrace, path: &Path, format: TraceFormat) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    match format {
        TraceFormat::Csv => {
            writeln!(w, "{CSV_HEADER}").map_err(io)?;
            let mut csv_w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut w);
            for rec in &trace.records {
                csv_w.serialize(rec).map_err(|e| csv_error(path, e))?;
            }
            csv_w.flush().map_err(io)?;
        }
        TraceFormat::Jsonl => {
            for rec in &trace.records {
                serde_json::to_writer(&mut w, rec).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
                w.write_all(b"\n").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads records written by [`export_trace`].
pub fn read_trace(path: &Path, format: TraceFormat) -> Result<Vec<SimRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        TraceFormat::Csv => {
            let mut rdr = csv::Reader::from_reader(file);
            let header = rdr.headers().map_err(|e| csv_error(path, e))?.iter().collect::<Vec<_>>().join(",");
            if header != CSV_HEADER {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("unexpected header {header:?}"),
                });
            }
            rdr.deserialize().map(|r| r.map_err(|e| csv_error(path, e))).collect()
        }
        TraceFormat::Jsonl => BufReader::new(file)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|line| {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })
            })
            .collect(),
    }
}
