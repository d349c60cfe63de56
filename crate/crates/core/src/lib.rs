//! Simulation engine for a driven-dissipative lattice of three-level
//! (spin-1) particles with power-law interactions between the upper levels.
//!
//! Solvers:
//! - [`liouville`]: exact Lindblad evolution of small systems (matrix-free);
//! - [`meanfield`]: thermodynamic-limit mean-field dynamics and Hopf analysis;
//! - [`cumulant`]: second-order cumulant expansion, thermodynamic limit and
//!   finite lattices;
//! - [`clustermf`]: cluster mean-field with self-consistent detunings.
//!
//! [`observables`] and [`engine`] are shared by all of them; [`commands`]
//! implements the batch experiments behind the `qctc` binary.

pub mod clustermf;
pub mod commands;
pub mod config;
pub mod cumulant;
pub mod engine;
pub mod error;
pub mod io;
pub mod liouville;
pub mod meanfield;
pub mod model;
pub mod observables;
pub mod site;

pub use error::{Error, Result};
pub use model::{InitialState, Lattice, ModelParams, SiteState};
