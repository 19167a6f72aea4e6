//! Single-phase SRM electrical model.
//!
//! The phase obeys `L(θ, i)·di/dt + R·i = u`, discretized with a forward
//! difference at a fixed sample period. The rotor turns at constant speed, so
//! the angle is a clock; the only nonlinearity is the inductance surface.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotorParams {
    /// Phase resistance (ohm).
    pub resistance: f64,
    /// Sample period (s).
    pub sample_period: f64,
    /// Unaligned (minimum) inductance (H).
    pub l_unaligned: f64,
    /// Aligned (maximum) inductance (H).
    pub l_aligned: f64,
    /// Mechanical angle of one electrical period (deg); 45 for a 12/8 machine.
    pub rotor_pitch: f64,
    /// Mechanical speed (RPM).
    pub speed_rpm: f64,
    /// DC-link voltage magnitude (V).
    pub v_dc: f64,
    /// Rated phase current (A).
    pub i_nominal: f64,
}

impl Default for MotorParams {
    fn default() -> Self {
        Self {
            resistance: 2.0,
            sample_period: 1e-4,
            l_unaligned: 6e-3,
            l_aligned: 16e-3,
            rotor_pitch: 45.0,
            speed_rpm: 60.0,
            v_dc: 100.0,
            i_nominal: 5.0,
        }
    }
}

impl MotorParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("resistance", self.resistance),
            ("sample_period", self.sample_period),
            ("l_unaligned", self.l_unaligned),
            ("l_aligned", self.l_aligned),
            ("rotor_pitch", self.rotor_pitch),
            ("speed_rpm", self.speed_rpm),
            ("v_dc", self.v_dc),
            ("i_nominal", self.i_nominal),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::InvalidParams(format!("motor.{name} is not finite")));
            }
        }
        let positive = [
            ("resistance", self.resistance),
            ("sample_period", self.sample_period),
            ("l_unaligned", self.l_unaligned),
            ("rotor_pitch", self.rotor_pitch),
            ("v_dc", self.v_dc),
            ("i_nominal", self.i_nominal),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(Error::InvalidParams(format!("motor.{name} must be > 0, got {v}")));
            }
        }
        if self.l_aligned <= self.l_unaligned {
            return Err(Error::InvalidParams(format!(
                "motor.l_aligned ({}) must exceed motor.l_unaligned ({})",
                self.l_aligned, self.l_unaligned
            )));
        }
        if self.speed_rpm < 0.0 {
            return Err(Error::InvalidParams("motor.speed_rpm must be >= 0".into()));
        }
        Ok(())
    }

    /// Forward-difference coefficients `(A, B)` for a frozen inductance.
    pub fn discretize(&self, inductance: f64) -> (f64, f64) {
        discretize(self.resistance, self.sample_period, inductance)
    }

    /// Rotor advance per sample, in mechanical degrees.
    pub fn degrees_per_step(&self) -> f64 {
        self.speed_rpm * 6.0 * self.sample_period
    }

    /// Samples per electrical period (one rotor pitch).
    pub fn steps_per_pitch(&self) -> Option<u64> {
        let d = self.degrees_per_step();
        (d > 0.0).then(|| (self.rotor_pitch / d).round() as u64)
    }

    /// Short hex digest of the exact parameter bits. Table files carry it so
    /// a table is never run against a plant it was not trained for.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in [
            self.resistance,
            self.sample_period,
            self.l_unaligned,
            self.l_aligned,
            self.rotor_pitch,
            self.speed_rpm,
            self.v_dc,
            self.i_nominal,
        ] {
            hasher.update(v.to_bits().to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Wraps `theta` into `[0, pitch)`.
pub fn wrap_angle(theta: f64, pitch: f64) -> f64 {
    let w = theta.rem_euclid(pitch);
    // rem_euclid can round up to exactly `pitch` for tiny negative inputs
    if w >= pitch {
        0.0
    } else {
        w
    }
}

/// `A = 1 - T·R/L`, `B = T/L`.
pub fn discretize(resistance: f64, sample_period: f64, inductance: f64) -> (f64, f64) {
    (
        1.0 - sample_period * resistance / inductance,
        sample_period / inductance,
    )
}

/// Shape of the analytic default surface and its sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceShape {
    /// Saturation depth.
    pub kappa: f64,
    /// Saturation knee current (A); `None` means the motor's nominal current.
    pub i_sat: Option<f64>,
    /// Distinct angle nodes per rotor pitch (a closing column is added).
    pub theta_nodes: usize,
    pub current_nodes: usize,
    /// Top of the current grid (A).
    pub current_max: f64,
}

impl Default for SurfaceShape {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            i_sat: None,
            theta_nodes: 16,
            current_nodes: 8,
            current_max: 7.0,
        }
    }
}

/// Closed-form inductance: raised cosine in angle (aligned at θ = 0),
/// varying part scaled by `1 / (1 + κ (i / i_sat)²)`.
pub fn analytic_inductance(params: &MotorParams, shape: &SurfaceShape, theta: f64, i: f64) -> f64 {
    let i_sat = shape.i_sat.unwrap_or(params.i_nominal);
    let cosine = (1.0 + (2.0 * PI * theta / params.rotor_pitch).cos()) / 2.0;
    let saturation = 1.0 / (1.0 + shape.kappa * (i / i_sat).powi(2));
    params.l_unaligned + (params.l_aligned - params.l_unaligned) * cosine * saturation
}

/// Tabulated `L(θ, i)` over one rotor pitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductanceSurface {
    theta_grid: Vec<f64>,
    current_grid: Vec<f64>,
    /// `values[t][c]` at `(theta_grid[t], current_grid[c])`.
    values: Vec<Vec<f64>>,
}

fn check_ascending(name: &str, grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::MalformedSurface(format!("{name} grid needs at least 2 nodes")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedSurface(format!("{name} grid has a non-finite node")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::MalformedSurface(format!("{name} grid is not strictly ascending")));
    }
    Ok(())
}

impl InductanceSurface {
    pub fn new(theta_grid: Vec<f64>, current_grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        check_ascending("theta", &theta_grid)?;
        check_ascending("current", &current_grid)?;
        if values.len() != theta_grid.len() || values.iter().any(|r| r.len() != current_grid.len()) {
            return Err(Error::MalformedSurface(format!(
                "value table must be {}x{}",
                theta_grid.len(),
                current_grid.len()
            )));
        }
        for (t, row) in values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::MalformedSurface(format!(
                        "inductance at theta {} / current {} must be positive, got {v}",
                        theta_grid[t], current_grid[c]
                    )));
                }
            }
            if row.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
                return Err(Error::MalformedSurface(format!(
                    "inductance increases with current at theta {}",
                    theta_grid[t]
                )));
            }
        }
        let first = &values[0];
        let last = &values[values.len() - 1];
        if first
            .iter()
            .zip(last)
            .any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(b.abs()))
        {
            return Err(Error::MalformedSurface(
                "first and last theta columns differ (surface must be periodic)".into(),
            ));
        }
        Ok(Self {
            theta_grid,
            current_grid,
            values,
        })
    }

    pub fn theta_grid(&self) -> &[f64] {
        &self.theta_grid
    }

    pub fn current_grid(&self) -> &[f64] {
        &self.current_grid
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Angular span of the table; the surface repeats with this period.
    pub fn period(&self) -> f64 {
        self.theta_grid[self.theta_grid.len() - 1] - self.theta_grid[0]
    }

    pub fn max_inductance(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::MIN, f64::max)
    }

    pub fn min_inductance(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::MAX, f64::min)
    }

    /// Bilinear lookup. `theta` wraps by the surface period and `i` is
    /// clamped to the current grid.
    pub fn inductance_at(&self, theta: f64, i: f64) -> f64 {
        let t0 = self.theta_grid[0];
        let theta = t0 + (theta - t0).rem_euclid(self.period());
        let (t, lt) = bracket(&self.theta_grid, theta);
        let (c, lc) = bracket(&self.current_grid, i);
        let v = &self.values;
        let low = v[t][c] + lc * (v[t][c + 1] - v[t][c]);
        let high = v[t + 1][c] + lc * (v[t + 1][c + 1] - v[t + 1][c]);
        low + lt * (high - low)
    }

    /// Reads the CSV layout: first row is the current grid (the leading cell
    /// is a label and ignored), first column is the angle grid, body in henries.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                message: format!("bad {what} value {s:?}"),
            })
        };
        let mut rows = reader.records();
        let header = match rows.next() {
            Some(r) => r.map_err(|e| csv_error(path, e))?,
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: "empty surface file".into(),
                })
            }
        };
        let current_grid = header
            .iter()
            .skip(1)
            .map(|s| parse(s, "current"))
            .collect::<Result<Vec<_>>>()?;
        let mut theta_grid = Vec::new();
        let mut values = Vec::new();
        for rec in rows {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let mut cells = rec.iter();
            let theta = cells.next().unwrap_or("");
            theta_grid.push(parse(theta, "theta")?);
            values.push(cells.map(|s| parse(s, "inductance")).collect::<Result<Vec<_>>>()?);
        }
        Self::new(theta_grid, current_grid, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["theta_deg\\i_A".to_string()];
        header.extend(self.current_grid.iter().map(|c| c.to_string()));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (theta, row) in self.theta_grid.iter().zip(&self.values) {
            let mut rec = vec![theta.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Lower node index and normalized offset of `x` in an ascending grid,
/// clamped to the grid ends. The returned index always has a successor.
fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    if x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0);
    }
    let j = grid.partition_point(|&g| g <= x) - 1;
    (j, (x - grid[j]) / (grid[j + 1] - grid[j]))
}

/// Samples the analytic profile onto `shape`'s grid.
pub fn surface_from_shape(params: &MotorParams, shape: &SurfaceShape) -> Result<InductanceSurface> {
    params.validate()?;
    if shape.theta_nodes < 1 || shape.current_nodes < 2 {
        return Err(Error::InvalidParams(
            "surface grid needs >= 1 angle node and >= 2 current nodes".into(),
        ));
    }
    if !(shape.current_max > 0.0 && shape.kappa >= 0.0) {
        return Err(Error::InvalidParams("surface current_max must be > 0 and kappa >= 0".into()));
    }
    if let Some(s) = shape.i_sat {
        if s <= 0.0 {
            return Err(Error::InvalidParams("surface i_sat must be > 0".into()));
        }
    }
    let n = shape.theta_nodes;
    let theta_grid: Vec<f64> = (0..=n)
        .map(|j| params.rotor_pitch * j as f64 / n as f64)
        .collect();
    let m = shape.current_nodes;
    let current_grid: Vec<f64> = (0..m)
        .map(|j| shape.current_max * j as f64 / (m - 1) as f64)
        .collect();
    let mut values: Vec<Vec<f64>> = theta_grid
        .iter()
        .map(|&t| {
            current_grid
                .iter()
                .map(|&i| analytic_inductance(params, shape, t, i))
                .collect()
        })
        .collect();
    // The closing column repeats the first one bit-for-bit.
    values[n] = values[0].clone();
    InductanceSurface::new(theta_grid, current_grid, values)
}

/// Default 16 × 8 analytic surface.
pub fn default_surface(params: &MotorParams) -> Result<InductanceSurface> {
    surface_from_shape(params, &SurfaceShape::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseState {
    /// Phase current (A).
    pub x: f64,
    /// Mechanical angle within one pitch (deg).
    pub theta: f64,
    pub k: u64,
}

impl PhaseState {
    pub fn at_rest(theta: f64) -> Self {
        Self { x: 0.0, theta, k: 0 }
    }
}

/// Advances the phase by one sample under voltage `u`.
///
/// The caller clamps `u` to the DC link. Current cannot reverse in an SRM
/// phase, so the result is floored at zero.
pub fn step_phase(
    state: PhaseState,
    u: f64,
    params: &MotorParams,
    surface: &InductanceSurface,
) -> Result<PhaseState> {
    if !u.is_finite() {
        return Err(Error::NonFinite("phase voltage"));
    }
    let l = surface.inductance_at(state.theta, state.x);
    let (a, b) = params.discretize(l);
    let x = (a * state.x + b * u).max(0.0);
    let theta = wrap_angle(state.theta + params.degrees_per_step(), params.rotor_pitch);
    Ok(PhaseState {
        x,
        theta,
        k: state.k + 1,
    })
}

/// Pulse-train current reference: a flat pulse inside the conduction window,
/// zero elsewhere, with optional amplitude steps at given sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceProfile {
    /// Pulse amplitude (A).
    pub i_ref: f64,
    pub theta_on: f64,
    pub theta_off: f64,
    /// `(step index, new amplitude)`, applied once `k` reaches the index.
    pub step_events: Vec<(u64, f64)>,
}

impl Default for ReferenceProfile {
    fn default() -> Self {
        Self {
            i_ref: 4.0,
            theta_on: 22.5,
            theta_off: 37.5,
            step_events: Vec::new(),
        }
    }
}

impl ReferenceProfile {
    pub fn validate(&self, rotor_pitch: f64) -> Result<()> {
        if !(self.i_ref.is_finite() && self.i_ref >= 0.0) {
            return Err(Error::InvalidParams(format!("reference amplitude must be >= 0, got {}", self.i_ref)));
        }
        if !(0.0 <= self.theta_on && self.theta_on < self.theta_off && self.theta_off <= rotor_pitch) {
            return Err(Error::InvalidParams(format!(
                "conduction window must satisfy 0 <= on < off <= {rotor_pitch}, got [{}, {})",
                self.theta_on, self.theta_off
            )));
        }
        if self.step_events.iter().any(|&(_, a)| !(a.is_finite() && a >= 0.0)) {
            return Err(Error::InvalidParams("reference step amplitudes must be >= 0".into()));
        }
        Ok(())
    }

    /// Amplitude in force at step `k`.
    pub fn amplitude_at(&self, k: u64) -> f64 {
        self.step_events
            .iter()
            .filter(|(at, _)| *at <= k)
            .max_by_key(|(at, _)| *at)
            .map_or(self.i_ref, |&(_, a)| a)
    }

    pub fn in_window(&self, theta: f64) -> bool {
        self.theta_on <= theta && theta < self.theta_off
    }

    pub fn reference_at(&self, theta: f64, k: u64) -> f64 {
        if self.in_window(theta) {
            self.amplitude_at(k)
        } else {
            0.0
        }
    }
}
