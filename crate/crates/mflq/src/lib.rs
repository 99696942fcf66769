//! Linear–quadratic mean-field control and two-player games.
//!
//! The crate solves the algebraic Riccati systems of mean-field LQ problems,
//! builds closed-loop strategies from them, certifies stabilization and
//! equilibrium, and checks the results by Monte Carlo simulation.

pub mod cli;
pub mod equilibrium;
pub mod linops;
pub mod model;
pub mod riccati;
pub mod simulate;
pub mod stabilizability;

pub use linops::{Mat, Vector};
pub use model::{ControlSpec, GameSpec, ZeroSumSpec};
pub use riccati::{SolveOptions, Solution, Status};
