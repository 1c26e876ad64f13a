//! Fourth-order finite-volume Vlasov–Poisson solver.

pub mod config;
pub mod diagnostics;
pub mod dispersion;
pub mod field;
pub mod fvm;
pub mod grid;
pub mod partition;
pub mod problems;
pub mod run;
pub mod sim;
pub mod snapshot;
pub mod stability;
pub mod timestep;
