//! SDRE control with an extended state observer, switching to ADRC outside an
//! estimated region of attraction.
//!
//! Modules build on each other bottom-up: [`matops`] (dense kernels),
//! [`riccati`] (CARE / Lyapunov solvers), [`sdc`] (state-dependent
//! coefficient factorizations from observer estimates), [`eso`] (extended
//! state observer), [`controller`] (switching law) and [`sim`] (plants and
//! closed-loop integration).

// negated float comparisons are used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod eso;
pub mod matops;
pub mod riccati;
pub mod sdc;
pub mod sim;

pub use controller::{ActiveMode, ControlMode, Controller, ControllerConfig};
pub use eso::{EsoConfig, EsoState};
pub use matops::{Matrix, Vector};
pub use riccati::{solve_care, CareProblem, CareSolution};
pub use sdc::{Estimate, SdcVariant, SystemDims};
pub use sim::{run, Plant, SimConfig, TrajectoryLog};
