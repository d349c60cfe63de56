//! Adaptive ODE integration and the checkpointed parameter sweep shared by
//! all solvers.

mod integrate;
mod sweep;

pub use integrate::{
    integrate, integrate_observed, sample_grid, Flow, IntegrationStats, IntegratorConfig, OdeSystem,
};
pub use sweep::{
    read_journal, sweep, Axis, CellOutput, CellRecord, CellStatus, GridSpec, ScanGrid, SweepOptions,
};
