//! Scenario-driven front end for the `sdre-eso` simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod report;
pub mod runner;
pub mod scenario;

pub use report::{CompareReport, RunSummary, SweepReport};
pub use runner::{compare, run_scenario, seed_sweep, CliError};
pub use scenario::{Scenario, ScenarioError};
