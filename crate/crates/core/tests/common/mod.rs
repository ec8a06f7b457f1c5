#![allow(dead_code)]

use sdre_eso::controller::{
    roa_closed_loop_jacobian, ClosedLoopSign, ControlMode, ControllerConfig,
};
use sdre_eso::eso::{default_coefficients, initialize, EsoConfig, GHatArgument};
use sdre_eso::matops::Matrix;
use sdre_eso::sdc::SdcVariant;
use sdre_eso::sim::{pendulum_plant, Plant, SimConfig};

pub const G: f64 = 9.81;
pub const L: f64 = 2.5;
pub const B: f64 = 10.0;

pub fn pendulum() -> Plant {
    pendulum_plant(G, L, B).unwrap()
}

/// Pendulum closed loop from 45° and 5°/s with a nearly converged observer.
pub fn pendulum_config(plant: &Plant, mode: ControlMode, epsilon: f64, dt: f64, t_final: f64) -> SimConfig {
    let dims = plant.dims;
    let q = Matrix::identity(2);
    let r = Matrix::scalar(1.0);
    let mut controller = ControllerConfig::new(
        dims,
        q.clone(),
        r.clone(),
        SdcVariant::default_discontinuous(dims).unwrap(),
        mode,
    );
    controller.roa = Some(
        roa_closed_loop_jacobian(
            dims,
            plant.df0.as_ref().unwrap(),
            plant.b0_true.as_ref().unwrap(),
            &q,
            &r,
            ClosedLoopSign::Corrected,
        )
        .unwrap(),
    );
    let mut eso = EsoConfig::linear(dims, epsilon, default_coefficients(2), plant.g_hat.clone()).unwrap();
    eso.g_hat_argument = GHatArgument::Measurement;
    let x0 = [45f64.to_radians(), 5f64.to_radians()];
    let ext0 = G / L * x0[0].sin() - B * x0[1];
    SimConfig {
        t_final,
        dt,
        x0: x0.into(),
        eso,
        controller,
        eso_init: initialize(dims, &[x0[0] + 1e-6, x0[1] - 1e-6], &[ext0]).unwrap(),
    }
}
