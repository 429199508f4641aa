//! Simulation of continuous-flow magnetophoretic cell capture in a
//! microfluidic channel lined with ferromagnetic wires.
//!
//! - [`magnetics`]: force on a cell near magnetized wires.
//! - [`transport`]: overdamped advection and trajectory integration.
//! - [`ensemble`]: seeded Monte Carlo capture statistics.
//! - [`config`] and [`experiment`]: scenario documents, sweeps and calibration.

pub mod config;
pub mod ensemble;
pub mod experiment;
pub mod magnetics;
pub mod transport;
pub mod units;

pub use config::{load_str, load_value, ScenarioConfig};
pub use ensemble::{run_ensemble, EnsembleStats, Population, RunOptions};
pub use transport::{CellSpecies, CellState, Outcome, Scenario, Trajectory};
