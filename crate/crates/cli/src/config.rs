//! TOML configuration. Every key is optional; an empty file (or no file)
//! gives the reference setup: 2 Ω, 0.1 ms sampling, 6/16 mH, 60 RPM,
//! Q = 100, R_u = 0.001, γ = 0.9, 4 A pulses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qsched_core::plant::{surface_from_shape, InductanceSurface, MotorParams, ReferenceProfile, SurfaceShape};
use qsched_core::qlearn::{Evaluator, TrainConfig};
use qsched_core::scheduler::{OnlineConfig, TableGrid, TableTraining};
use qsched_core::sim::{Controller, MetricsConfig, Scenario, SAFETY_FACTOR};
use qsched_core::TrackingWeights;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub motor: MotorParams,
    pub surface: SurfaceSection,
    pub grid: TableGrid,
    pub training: TrainingSection,
    pub online: OnlineConfig,
    pub scenario: ScenarioSection,
    pub metrics: MetricsConfig,
}

/// Either a CSV file or the analytic profile parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSection {
    /// CSV surface; relative paths are resolved against the config file.
    pub file: Option<PathBuf>,
    pub kappa: f64,
    pub i_sat: Option<f64>,
    pub theta_nodes: usize,
    pub current_nodes: usize,
    pub current_max: f64,
}

impl Default for SurfaceSection {
    fn default() -> Self {
        let s = SurfaceShape::default();
        Self {
            file: None,
            kappa: s.kappa,
            i_sat: s.i_sat,
            theta_nodes: s.theta_nodes,
            current_nodes: s.current_nodes,
            current_max: s.current_max,
        }
    }
}

impl SurfaceSection {
    pub fn shape(&self) -> SurfaceShape {
        SurfaceShape {
            kappa: self.kappa,
            i_sat: self.i_sat,
            theta_nodes: self.theta_nodes,
            current_nodes: self.current_nodes,
            current_max: self.current_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub gamma: f64,
    /// Output tracking weight.
    pub q: f64,
    /// Input weight.
    pub r_u: f64,
    /// Initial stabilizing gain `[K_x, K_r]`.
    pub k0: [f64; 2],
    pub tau: f64,
    /// Exploration noise half-width during training (V).
    pub dither: f64,
    /// Convergence threshold on the gain step.
    pub tol: f64,
    pub max_iter: usize,
    pub tuples_per_iter: usize,
    pub evaluator: Evaluator,
    pub reference_hold: u64,
    /// Upper end of the training reference levels (A); defaults to the nominal current.
    pub reference_max: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TableTraining::default();
        let w = TrackingWeights::default();
        Self {
            gamma: t.learner.gamma,
            q: w.q,
            r_u: w.r_u,
            k0: t.k0,
            tau: t.learner.tau,
            dither: t.learner.dither,
            tol: t.learner.tol,
            max_iter: t.learner.max_iter,
            tuples_per_iter: t.learner.tuples_per_iter,
            evaluator: t.learner.evaluator,
            reference_hold: t.reference_hold,
            reference_max: t.reference_max,
            seed: t.learner.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    ScheduledQ,
    SingleQcore,
    DeltaModulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub controller: ControllerKind,
    /// `[row, col]` of the core used by `single-qcore`.
    pub core: [usize; 2],
    /// Dead band of `delta-modulation` (A).
    pub delta_band: f64,
    /// Samples to simulate.
    pub duration: u64,
    pub seed: u64,
    pub online_learning: bool,
    /// Exploration noise half-width while learning online (V).
    pub dither: f64,
    /// Plant resistance multiplier, for model-mismatch studies.
    pub resistance_scale: f64,
    pub i_ref: f64,
    pub theta_on: f64,
    pub theta_off: f64,
    /// `[[step, amplitude], ...]` reference changes.
    pub events: Vec<(u64, f64)>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let r = ReferenceProfile::default();
        Self {
            controller: ControllerKind::ScheduledQ,
            core: [0, 0],
            delta_band: 0.0,
            duration: 6250,
            seed: 0,
            online_learning: false,
            dither: 2.0,
            resistance_scale: 1.0,
            i_ref: r.i_ref,
            theta_on: r.theta_on,
            theta_off: r.theta_off,
            events: Vec::new(),
        }
    }
}

impl Config {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(f) = &cfg.surface.file {
            if f.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.surface.file = Some(base.join(f));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// The fully populated configuration, loadable as-is.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Checks every section by building what it describes.
    pub fn validate(&self) -> Result<(), CliError> {
        self.motor.validate()?;
        self.grid.validate()?;
        self.training_setup()?.learner.validate()?;
        self.weights()?;
        let online = self.online;
        if !(online.tau > 0.0 && online.gain_clamp > 0.0) {
            return Err(CliError::Config("online tau and gain_clamp must be > 0".into()));
        }
        let mc = self.metrics;
        if !(0.0..1.0).contains(&mc.settle_band) || mc.settle_band == 0.0 {
            return Err(CliError::Config("metrics settle_band must lie in (0, 1)".into()));
        }
        self.scenario(self.surface()?)?.validate()?;
        Ok(())
    }

    pub fn weights(&self) -> Result<TrackingWeights, CliError> {
        Ok(TrackingWeights::new(self.training.q, self.training.r_u, 1.0)?)
    }

    pub fn surface(&self) -> Result<InductanceSurface, CliError> {
        match &self.surface.file {
            Some(path) => {
                if !path.is_file() {
                    return Err(CliError::Config(format!("surface file {} does not exist", path.display())));
                }
                Ok(InductanceSurface::from_csv(path)?)
            }
            None => Ok(surface_from_shape(&self.motor, &self.surface.shape())?),
        }
    }

    pub fn training_setup(&self) -> Result<TableTraining, CliError> {
        let t = &self.training;
        let learner = TrainConfig {
            gamma: t.gamma,
            tau: t.tau,
            dither: t.dither,
            tol: t.tol,
            max_iter: t.max_iter,
            tuples_per_iter: t.tuples_per_iter,
            safety_bound: SAFETY_FACTOR * self.motor.i_nominal,
            seed: t.seed,
            evaluator: t.evaluator,
        };
        Ok(TableTraining {
            grid: self.grid,
            k0: t.k0,
            learner,
            reference_hold: t.reference_hold,
            reference_max: t.reference_max,
        })
    }

    pub fn controller(&self) -> Controller {
        let s = &self.scenario;
        match s.controller {
            ControllerKind::ScheduledQ => Controller::ScheduledQ,
            ControllerKind::SingleQcore => Controller::SingleQcore {
                row: s.core[0],
                col: s.core[1],
            },
            ControllerKind::DeltaModulation => Controller::DeltaModulation { band: s.delta_band },
        }
    }

    pub fn scenario(&self, surface: InductanceSurface) -> Result<Scenario, CliError> {
        let s = &self.scenario;
        Ok(Scenario {
            motor: self.motor,
            surface,
            reference: ReferenceProfile {
                i_ref: s.i_ref,
                theta_on: s.theta_on,
                theta_off: s.theta_off,
                step_events: s.events.clone(),
            },
            controller: self.controller(),
            duration: s.duration,
            seed: s.seed,
            online_learning: s.online_learning,
            dither: s.dither,
            resistance_scale: s.resistance_scale,
            weights: self.weights()?,
        })
    }

    /// Applies a command-line seed to both training and the scenario.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.training.seed = seed;
            self.scenario.seed = seed;
        }
        self
    }
}
