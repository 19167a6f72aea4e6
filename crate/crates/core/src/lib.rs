//! Gain-scheduled Q-learning current control for switched reluctance motors.
//!
//! The crate is layered bottom-up:
//!
//! - [`plant`]: motor parameters, the inductance surface and the per-step phase model.
//! - [`lqt`]: model-based discounted tracking (Riccati iteration and policy iteration),
//!   used for training checks and as a test oracle.
//! - [`qlearn`]: model-free Q-function policy iteration from data tuples. It only
//!   sees states, actions and costs through the [`qlearn::Environment`] trait.
//! - [`scheduler`]: the table of Q-cores over (current, angle), bilinear blending,
//!   offline training, online refinement and persistence.
//! - [`sim`]: closed-loop simulation, the delta-modulation baseline, metrics and traces.

// `!(x <= bound)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// a failed run hands back its partial trace by value
#![allow(clippy::result_large_err)]

pub mod error;
pub mod gain;
pub mod lqt;
pub mod plant;
pub mod qlearn;
pub mod scheduler;
pub mod sim;

pub use error::{CoreFailure, Error, Result};
pub use gain::{AugState, PolicyGain, TrackingWeights};
pub use plant::{InductanceSurface, MotorParams, PhaseState, ReferenceProfile, SurfaceShape};
pub use qlearn::{DataTuple, QKernel, TrainConfig};
pub use scheduler::{QCoreTable, TableGrid, TableTraining};
pub use sim::{Controller, Metrics, MetricsConfig, Scenario, SimTrace};
