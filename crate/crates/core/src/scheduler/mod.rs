//! Table of Q-cores over the (angle, current) plane.
//!
//! Each core is a Q-kernel trained against the phase with its inductance
//! frozen at that node. At run time the four cores around the operating
//! point are blended bilinearly and the gain is taken from the blend.

mod persist;

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreFailure, Error, Result};
use crate::gain::{AugState, PolicyGain, TrackingWeights};
use crate::lqt;
use crate::plant::{wrap_angle, InductanceSurface, MotorParams};
use crate::qlearn::{self, DataTuple, Environment, QKernel, RlsState, TrainConfig, Transition};

pub use persist::{load_table, save_table, TABLE_FORMAT_VERSION};

/// Largest relative gap between a trained core's gain and the Riccati gain
/// of its frozen plant before the core is rejected.
pub const ORACLE_GAP_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableGrid {
    /// Distinct angle nodes per rotor pitch.
    pub theta_nodes: usize,
    pub current_nodes: usize,
    /// Current of the top row (A); rows are evenly spaced from 0.
    pub current_max: f64,
}

impl Default for TableGrid {
    fn default() -> Self {
        Self {
            theta_nodes: 16,
            current_nodes: 8,
            current_max: 7.0,
        }
    }
}

impl TableGrid {
    pub fn validate(&self) -> Result<()> {
        if self.theta_nodes == 0 || self.current_nodes == 0 {
            return Err(Error::InvalidParams("table grid needs at least one node per axis".into()));
        }
        if self.current_nodes > 1 && !(self.current_max > 0.0) {
            return Err(Error::InvalidParams("grid current_max must be > 0".into()));
        }
        Ok(())
    }

    pub fn theta_nodes(&self, pitch: f64) -> Vec<f64> {
        (0..self.theta_nodes)
            .map(|j| pitch * j as f64 / self.theta_nodes as f64)
            .collect()
    }

    pub fn current_nodes(&self) -> Vec<f64> {
        if self.current_nodes == 1 {
            return vec![0.0];
        }
        (0..self.current_nodes)
            .map(|j| self.current_max * j as f64 / (self.current_nodes - 1) as f64)
            .collect()
    }
}

/// Online refinement settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// Initial covariance scale of each core's RLS state.
    pub tau: f64,
    /// Largest relative gain change one update may make.
    pub gain_clamp: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            tau: 1e6,
            gain_clamp: 0.05,
        }
    }
}

/// Enclosing cell of an operating point: lower-left corner indices and the
/// normalized offsets along angle (`l1`) and current (`l2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLocation {
    /// Current index of the lower corner.
    pub row: usize,
    /// Angle index of the lower corner.
    pub col: usize,
    pub l1: f64,
    pub l2: f64,
}

/// Gain actually applied at an operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub gain: PolicyGain,
    pub location: CellLocation,
    /// The blended kernel had `G_uu <= 0` and the nearest core's gain was used.
    pub fell_back: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineUpdate {
    pub row: usize,
    pub col: usize,
    /// Prior Bellman error of the tuple.
    pub innovation: f64,
    /// Fraction of the RLS step kept after rate limiting (0 = rejected).
    pub step_fraction: f64,
    pub gain_change: f64,
}

#[derive(Debug)]
pub struct QCoreTable {
    theta_nodes: Vec<f64>,
    current_nodes: Vec<f64>,
    pitch: f64,
    gamma: f64,
    motor_fingerprint: String,
    /// Row-major: `row * theta_nodes.len() + col`, rows along current.
    cores: Vec<QKernel>,
    gains: Vec<PolicyGain>,
    rls: Vec<RlsState>,
    online: OnlineConfig,
    fallbacks: AtomicU64,
}

impl Clone for QCoreTable {
    fn clone(&self) -> Self {
        Self {
            theta_nodes: self.theta_nodes.clone(),
            current_nodes: self.current_nodes.clone(),
            pitch: self.pitch,
            gamma: self.gamma,
            motor_fingerprint: self.motor_fingerprint.clone(),
            cores: self.cores.clone(),
            gains: self.gains.clone(),
            rls: self.rls.clone(),
            online: self.online,
            fallbacks: AtomicU64::new(self.fallbacks.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for QCoreTable {
    fn eq(&self, other: &Self) -> bool {
        self.theta_nodes == other.theta_nodes
            && self.current_nodes == other.current_nodes
            && self.pitch == other.pitch
            && self.gamma == other.gamma
            && self.motor_fingerprint == other.motor_fingerprint
            && self.cores == other.cores
    }
}

fn strictly_ascending(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

impl QCoreTable {
    /// Builds a table from trained kernels laid out row-major (rows along
    /// current). Angle nodes must lie within one period starting at the first.
    pub fn new(
        theta_nodes: Vec<f64>,
        current_nodes: Vec<f64>,
        pitch: f64,
        gamma: f64,
        motor_fingerprint: String,
        cores: Vec<QKernel>,
    ) -> Result<Self> {
        if theta_nodes.is_empty() || current_nodes.is_empty() {
            return Err(Error::InvalidParams("table needs at least one node per axis".into()));
        }
        if !strictly_ascending(&theta_nodes) || !strictly_ascending(&current_nodes) {
            return Err(Error::InvalidParams("table grids must be strictly ascending".into()));
        }
        if !(pitch > 0.0 && theta_nodes[theta_nodes.len() - 1] < theta_nodes[0] + pitch) {
            return Err(Error::InvalidParams("angle nodes must fit inside one rotor pitch".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidParams(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if cores.len() != theta_nodes.len() * current_nodes.len() {
            return Err(Error::InvalidParams(format!(
                "expected {} cores, got {}",
                theta_nodes.len() * current_nodes.len(),
                cores.len()
            )));
        }
        let gains = cores
            .iter()
            .map(qlearn::policy_improvement)
            .collect::<Result<Vec<_>>>()?;
        let online = OnlineConfig::default();
        let rls = cores.iter().map(|c| RlsState::new(c.to_vec(), online.tau)).collect();
        Ok(Self {
            theta_nodes,
            current_nodes,
            pitch,
            gamma,
            motor_fingerprint,
            cores,
            gains,
            rls,
            online,
            fallbacks: AtomicU64::new(0),
        })
    }

    /// Replaces the online settings and restarts every core's RLS state.
    pub fn set_online_config(&mut self, online: OnlineConfig) {
        self.online = online;
        self.rls = self
            .cores
            .iter()
            .map(|c| RlsState::new(c.to_vec(), online.tau))
            .collect();
    }

    pub fn theta_nodes(&self) -> &[f64] {
        &self.theta_nodes
    }

    pub fn current_nodes(&self) -> &[f64] {
        &self.current_nodes
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn motor_fingerprint(&self) -> &str {
        &self.motor_fingerprint
    }

    pub fn rows(&self) -> usize {
        self.current_nodes.len()
    }

    pub fn cols(&self) -> usize {
        self.theta_nodes.len()
    }

    fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn core(&self, row: usize, col: usize) -> &QKernel {
        &self.cores[self.index(row, col)]
    }

    pub fn gain(&self, row: usize, col: usize) -> &PolicyGain {
        &self.gains[self.index(row, col)]
    }

    pub fn cores(&self) -> &[QKernel] {
        &self.cores
    }

    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Enclosing cell of `(theta, i)`. Angles wrap by the pitch, currents
    /// clamp to the grid; at or above the top row the top node is the lower
    /// corner with `l2 = 0`.
    pub fn locate(&self, theta: f64, i: f64) -> CellLocation {
        let t0 = self.theta_nodes[0];
        let theta = t0 + wrap_angle(theta - t0, self.pitch);
        let (col, l1) = if self.cols() == 1 {
            (0, 0.0)
        } else {
            let col = self.theta_nodes.partition_point(|&t| t <= theta).max(1) - 1;
            let upper = if col + 1 < self.cols() {
                self.theta_nodes[col + 1]
            } else {
                t0 + self.pitch
            };
            let l1 = (theta - self.theta_nodes[col]) / (upper - self.theta_nodes[col]);
            (col, l1.clamp(0.0, 1.0 - f64::EPSILON))
        };
        let nodes = &self.current_nodes;
        let last = nodes.len() - 1;
        let i = i.clamp(nodes[0], nodes[last]);
        let (row, l2) = if last == 0 || i >= nodes[last] {
            (last, 0.0)
        } else {
            let row = nodes.partition_point(|&c| c <= i).max(1) - 1;
            (row, (i - nodes[row]) / (nodes[row + 1] - nodes[row]))
        };
        CellLocation { row, col, l1, l2 }
    }

    /// Corner indices `[Q11, Q12, Q21, Q22]` as `(row, col)`: `Q1·` on the
    /// lower current row, `·2` on the next angle node (wrapping).
    pub fn corners(&self, loc: &CellLocation) -> [(usize, usize); 4] {
        let up_row = (loc.row + 1).min(self.rows() - 1);
        let next_col = (loc.col + 1) % self.cols();
        [
            (loc.row, loc.col),
            (loc.row, next_col),
            (up_row, loc.col),
            (up_row, next_col),
        ]
    }

    /// Corner of the enclosing cell closest in normalized distance; ties go
    /// to the first of lower-left, angle neighbour, current neighbour.
    pub fn nearest_index(&self, loc: &CellLocation) -> (usize, usize) {
        let corners = self.corners(loc);
        let offsets = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (n, (a, b)) in offsets.iter().enumerate() {
            let d = (loc.l1 - a).powi(2) + (loc.l2 - b).powi(2);
            if d < best_d {
                best_d = d;
                best = n;
            }
        }
        corners[best]
    }

    pub fn nearest_core(&self, theta: f64, i: f64) -> &QKernel {
        let (r, c) = self.nearest_index(&self.locate(theta, i));
        self.core(r, c)
    }

    pub fn nearest_gain(&self, theta: f64, i: f64) -> &PolicyGain {
        let (r, c) = self.nearest_index(&self.locate(theta, i));
        self.gain(r, c)
    }

    /// Bilinear blend of the four corner kernels at a located point.
    pub fn blend(&self, loc: &CellLocation) -> QKernel {
        let [q11, q12, q21, q22] = self.corners(loc).map(|(r, c)| self.core(r, c).g);
        let (l1, l2) = (loc.l1, loc.l2);
        let low: Matrix3<f64> = q11 * (1.0 - l1) + q12 * l1;
        let high: Matrix3<f64> = q21 * (1.0 - l1) + q22 * l1;
        QKernel {
            g: low * (1.0 - l2) + high * l2,
        }
    }

    pub fn scheduled_q(&self, theta: f64, i: f64) -> QKernel {
        self.blend(&self.locate(theta, i))
    }

    pub fn schedule(&self, theta: f64, i: f64) -> Schedule {
        let location = self.locate(theta, i);
        match qlearn::policy_improvement(&self.blend(&location)) {
            Ok(gain) => Schedule {
                gain,
                location,
                fell_back: false,
            },
            Err(_) => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                let (r, c) = self.nearest_index(&location);
                Schedule {
                    gain: *self.gain(r, c),
                    location,
                    fell_back: true,
                }
            }
        }
    }

    pub fn scheduled_gain(&self, theta: f64, i: f64) -> PolicyGain {
        self.schedule(theta, i).gain
    }

    /// One RLS step on the nearest core using the tuple's Bellman row.
    ///
    /// A step that would move the core's gain by more than the configured
    /// fraction is shrunk until it does not; a step that cannot be made
    /// admissible is dropped.
    pub fn update_core_online(&mut self, tuple: &DataTuple, theta: f64, i: f64) -> OnlineUpdate {
        let (row, col) = self.nearest_index(&self.locate(theta, i));
        self.update_core_at(row, col, tuple)
    }

    /// [`update_core_online`](Self::update_core_online) on an explicit core.
    ///
    /// # Panics
    /// If `(row, col)` is outside the grid.
    pub fn update_core_at(&mut self, row: usize, col: usize, tuple: &DataTuple) -> OnlineUpdate {
        assert!(row < self.rows() && col < self.cols(), "core ({row}, {col}) outside the table");
        let idx = self.index(row, col);
        let old_gain = self.gains[idx];
        let old_g = self.rls[idx].g_vec;
        let mut candidate = self.rls[idx].clone();
        let innovation = candidate.update(&tuple.bellman_row(self.gamma), tuple.stage_cost);
        let limit = self.online.gain_clamp * old_gain.norm().max(1e-9);

        let mut fraction = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let g = old_g + (candidate.g_vec - old_g) * fraction;
            let kernel = QKernel::from_vec(&g);
            if let Ok(gain) = qlearn::policy_improvement(&kernel) {
                if gain.distance(&old_gain) <= limit {
                    accepted = Some((g, kernel, gain));
                    break;
                }
            }
            fraction *= 0.5;
        }
        match accepted {
            Some((g, kernel, gain)) => {
                candidate.g_vec = g;
                self.rls[idx] = candidate;
                self.cores[idx] = kernel;
                self.gains[idx] = gain;
                OnlineUpdate {
                    row,
                    col,
                    innovation,
                    step_fraction: fraction,
                    gain_change: gain.distance(&old_gain),
                }
            }
            None => OnlineUpdate {
                row,
                col,
                innovation,
                step_fraction: 0.0,
                gain_change: 0.0,
            },
        }
    }
}

/// The phase with its inductance frozen at one node, starting at zero current
/// and driven by a piecewise constant reference whose level is drawn from
/// `[0, reference_max]` every `hold` samples. Neither
/// the input nor the current is limited: this is the local linear model a
/// core is trained on, and saturated inputs would starve the regression of
/// excitation.
#[derive(Debug, Clone)]
pub struct FrozenPlantEnv {
    a: f64,
    b: f64,
    reference_max: f64,
    hold: u64,
    x: f64,
    r: f64,
    steps: u64,
    rng: ChaCha8Rng,
}

impl FrozenPlantEnv {
    pub fn new(params: &MotorParams, inductance: f64, reference_max: f64, hold: u64, seed: u64) -> Self {
        let (a, b) = params.discretize(inductance);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(0.0..=reference_max.max(0.0));
        Self {
            a,
            b,
            reference_max,
            hold: hold.max(1),
            x: 0.0,
            r,
            steps: 0,
            rng,
        }
    }
}

impl Environment for FrozenPlantEnv {
    fn observe(&self) -> AugState {
        AugState::new(self.x, self.r)
    }

    fn step(&mut self, u: f64) -> Result<Transition> {
        if !u.is_finite() {
            return Err(Error::NonFinite("training input"));
        }
        self.x = self.a * self.x + self.b * u;
        let next = AugState::new(self.x, self.r);
        self.steps += 1;
        if self.steps % self.hold == 0 {
            self.r = self.rng.random_range(0.0..=self.reference_max);
        }
        Ok(Transition { applied_u: u, next })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TableTraining {
    pub grid: TableGrid,
    /// Initial stabilizing gain `[K_x, K_r]`.
    pub k0: [f64; 2],
    pub learner: TrainConfig,
    /// Samples each training reference level is held for.
    pub reference_hold: u64,
    /// Training reference levels are drawn from `[0, reference_max]` (A);
    /// `None` uses the nominal current.
    pub reference_max: Option<f64>,
}

impl Default for TableTraining {
    fn default() -> Self {
        Self {
            grid: TableGrid::default(),
            k0: [100.0, -100.0],
            learner: TrainConfig::default(),
            reference_hold: 1,
            reference_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoreReport {
    pub row: usize,
    pub col: usize,
    pub theta_deg: f64,
    pub current_a: f64,
    pub inductance_h: f64,
    pub iterations: usize,
    pub gain: [f64; 2],
    pub oracle_gain: [f64; 2],
    /// `‖K − K_oracle‖ / ‖K_oracle‖`.
    pub oracle_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub cores: Vec<CoreReport>,
}

impl TrainReport {
    pub fn max_oracle_gap(&self) -> f64 {
        self.cores.iter().map(|c| c.oracle_gap).fold(0.0, f64::max)
    }
}

fn core_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains every node of the grid against its frozen local plant, in
/// parallel. Each core's gain is checked against the Riccati gain of the
/// same frozen plant.
pub fn train_table(
    params: &MotorParams,
    surface: &InductanceSurface,
    weights: &TrackingWeights,
    training: &TableTraining,
) -> Result<(QCoreTable, TrainReport)> {
    params.validate()?;
    training.grid.validate()?;
    training.learner.validate()?;
    let k0 = PolicyGain::new(training.k0[0], training.k0[1])?;
    let thetas = training.grid.theta_nodes(params.rotor_pitch);
    let currents = training.grid.current_nodes();
    let cols = thetas.len();
    let reference_max = training.reference_max.unwrap_or(params.i_nominal);

    let results: Vec<std::result::Result<(QKernel, CoreReport), CoreFailure>> = (0..thetas.len() * currents.len())
        .into_par_iter()
        .map(|index| {
            let (row, col) = (index / cols, index % cols);
            let (theta, current) = (thetas[col], currents[row]);
            let fail = |reason: String| CoreFailure {
                row,
                col,
                theta_deg: theta,
                current_a: current,
                reason,
            };
            let inductance = surface.inductance_at(theta, current);
            let seed = core_seed(training.learner.seed, index);
            let mut env = FrozenPlantEnv::new(params, inductance, reference_max, training.reference_hold, seed);
            let cfg = TrainConfig {
                seed: seed.rotate_left(17),
                ..training.learner
            };
            let outcome = qlearn::q_policy_iteration(&mut env, &k0, weights, &cfg).map_err(|e| fail(e.to_string()))?;

            let model = lqt::frozen_model(params, inductance, weights, cfg.gamma).map_err(|e| fail(e.to_string()))?;
            let p = lqt::are_fixed_point(&model, lqt::DEFAULT_ARE_TOL, lqt::DEFAULT_ARE_MAX_ITER)
                .map_err(|e| fail(format!("oracle: {e}")))?;
            let oracle = lqt::optimal_gain(&p, &model).map_err(|e| fail(format!("oracle: {e}")))?;
            let gap = outcome.gain.distance(&oracle) / oracle.norm().max(f64::MIN_POSITIVE);
            if !(gap <= ORACLE_GAP_LIMIT) {
                return Err(fail(format!(
                    "gain [{:.4}, {:.4}] is {:.3}% from the Riccati gain [{:.4}, {:.4}]",
                    outcome.gain.k_x(),
                    outcome.gain.k_r(),
                    100.0 * gap,
                    oracle.k_x(),
                    oracle.k_r()
                )));
            }
            Ok((
                outcome.kernel,
                CoreReport {
                    row,
                    col,
                    theta_deg: theta,
                    current_a: current,
                    inductance_h: inductance,
                    iterations: outcome.iterations,
                    gain: [outcome.gain.k_x(), outcome.gain.k_r()],
                    oracle_gain: [oracle.k_x(), oracle.k_r()],
                    oracle_gap: gap,
                },
            ))
        })
        .collect();

    let mut cores = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((k, rep)) => {
                cores.push(k);
                reports.push(rep);
            }
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        return Err(Error::CoreTraining(failures));
    }
    let table = QCoreTable::new(
        thetas,
        currents,
        params.rotor_pitch,
        training.learner.gamma,
        params.fingerprint(),
        cores,
    )?;
    Ok((table, TrainReport { cores: reports }))
}
