//! Shared fixtures for the benchmarks.

use qsched_core::gain::TrackingWeights;
use qsched_core::plant::default_surface;
use qsched_core::scheduler::train_table;
use qsched_core::{Controller, InductanceSurface, MotorParams, QCoreTable, Scenario, TableTraining};

/// Reference motor, its surface and a trained default table.
pub struct Fixture {
    pub motor: MotorParams,
    pub surface: InductanceSurface,
    pub table: QCoreTable,
}

impl Fixture {
    pub fn new() -> Self {
        let motor = MotorParams::default();
        let surface = default_surface(&motor).expect("default surface");
        let (table, _) = train_table(&motor, &surface, &TrackingWeights::default(), &TableTraining::default())
            .expect("default table trains");
        Self { motor, surface, table }
    }

    /// One electrical cycle under `controller`.
    pub fn one_cycle(&self, controller: Controller, online_learning: bool) -> Scenario {
        let mut s = Scenario::nominal(self.motor, self.surface.clone(), controller);
        s.duration = s.cycle_len();
        s.online_learning = online_learning;
        s
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
