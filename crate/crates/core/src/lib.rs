//! Distributed volt/var control on radial distribution feeders with 2-bit
//! inter-bus messages.
//!
//! - [`grid`]: feeder topology and the linear model matrices
//! - [`plant`]: linear and branch-flow voltage response
//! - [`control`]: per-bus controllers and synchronous rounds
//! - [`analysis`]: dual objective, merit function and certificate constants
//! - [`sim`]: scenario runs, monitors and trace files
//! - [`feeder`], [`generator`]: instance files and synthetic feeders
//! - [`cli`]: the `voltreg` command

// Negated comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod control;
pub mod feeder;
pub mod generator;
pub mod grid;
pub mod plant;
pub mod sim;
