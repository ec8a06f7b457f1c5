//! Turning scenarios into simulations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use sdre_eso::controller::{
    adrc_gain, roa_closed_loop_jacobian, ClosedLoopSign, ControlError, ControlMode, ControllerConfig,
    SingularFallback,
};
use sdre_eso::eso::{default_coefficients, initialize, EsoConfig, GHatArgument};
use sdre_eso::matops::{Matrix, Vector};
use sdre_eso::sdc::{ContinuousSdc, DiscontinuousSdc, SdcVariant, SystemDims, WeightRule};
use sdre_eso::sim::{chain_integrator_plant, pendulum_plant, run, Plant, SimConfig, SimError, TrajectoryLog};

use crate::report::{write_csv, write_envelope, CompareReport, RunSummary, SweepReport};
use crate::scenario::{
    ExtInit, ExtKeyword, FallbackName, GHatArg, ModeName, PlantKind, Scenario, ScenarioError, SdcName, SignName,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{context}: {message}")]
    Config { context: String, message: String },
    #[error("{context}: {source}")]
    Divergence {
        context: String,
        #[source]
        source: SimError,
    },
    #[error("{context}: {message}")]
    Solver { context: String, message: String },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 configuration, 2 divergence, 3 solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Scenario(_) | Self::Config { .. } | Self::Io { .. } => 1,
            Self::Divergence { .. } => 2,
            Self::Solver { .. } => 3,
        }
    }

    fn from_sim(context: &str, err: SimError) -> Self {
        let context = context.to_string();
        match err {
            SimError::Config(message) | SimError::Parameter(message) => Self::Config { context, message },
            SimError::Divergence { .. } => Self::Divergence { context, source: err },
            SimError::Control { source: ControlError::Config(message), .. } => Self::Config { context, message },
            other => Self::Solver {
                context,
                message: other.to_string(),
            },
        }
    }
}

pub fn control_mode(mode: ModeName) -> ControlMode {
    match mode {
        ModeName::Switching => ControlMode::Switching,
        ModeName::Sdre => ControlMode::SdreEsoOnly,
        ModeName::Adrc => ControlMode::AdrcOnly,
    }
}

fn matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

pub fn build_plant(s: &Scenario) -> Result<Plant, CliError> {
    match s.plant.kind {
        PlantKind::Pendulum => pendulum_plant(
            s.plant.g.unwrap_or_default(),
            s.plant.l.unwrap_or_default(),
            s.plant.b.unwrap_or_default(),
        )
        .map_err(|e| CliError::from_sim(&s.name, e)),
        PlantKind::ChainIntegrator => {
            let (k, n) = s.dims();
            let dims = SystemDims::new(k, n).map_err(|e| CliError::Config {
                context: s.name.clone(),
                message: e.to_string(),
            })?;
            Ok(chain_integrator_plant(dims))
        }
    }
}

fn config_err(s: &Scenario, e: impl ToString) -> CliError {
    CliError::Config {
        context: s.name.clone(),
        message: e.to_string(),
    }
}

/// Full simulation setup for one run. `x0` overrides the scenario's initial
/// state (the observer estimate follows it) and `k_out` pins the ADRC gain.
pub fn build_config(
    s: &Scenario,
    plant: &Plant,
    mode: ModeName,
    x0: Option<&[f64]>,
    k_out: Option<Matrix>,
) -> Result<SimConfig, CliError> {
    let dims = plant.dims;
    let (k, n) = (dims.k(), dims.n());
    let x0: Vec<f64> = x0.map_or_else(|| s.simulation.x0.clone(), <[f64]>::to_vec);

    let o = &s.observer;
    let coefficients = o.coefficients.clone().unwrap_or_else(|| default_coefficients(k));
    let mut eso = EsoConfig::linear(dims, o.epsilon, coefficients, plant.g_hat.clone()).map_err(|e| config_err(s, e))?;
    eso.g_hat_argument = match o.g_hat_argument {
        GHatArg::Estimate => GHatArgument::Estimate,
        GHatArg::Measurement => GHatArgument::Measurement,
    };
    let mut xhat0 = o.xhat0.clone().unwrap_or_else(|| x0.clone());
    if let Some(offset) = &o.xhat0_offset {
        for (v, d) in xhat0.iter_mut().zip(offset) {
            *v += d;
        }
    }
    let ext0 = match &o.ext0 {
        ExtInit::Values(v) => v.clone(),
        ExtInit::Keyword(ExtKeyword::Zero) => vec![0.0; n],
        ExtInit::Keyword(ExtKeyword::Drift) => (plant.f)(&x0),
    };
    let eso_init = initialize(dims, &xhat0, &ext0).map_err(|e| config_err(s, e))?;

    let c = &s.controller;
    let q = matrix(&c.q);
    let r = matrix(&c.r);
    let sdc_variant = match c.sdc {
        SdcName::Discontinuous => DiscontinuousSdc::new(dims, c.rho.clone().unwrap_or(vec![1.0; n]), WeightRule::Uniform)
            .map(SdcVariant::Discontinuous),
        SdcName::Continuous => ContinuousSdc::new(dims, c.varpi.unwrap_or(1.0), c.varrho.clone().unwrap_or(vec![1.0; n]))
            .map(SdcVariant::Continuous),
        SdcName::ContinuousScalar => Ok(SdcVariant::ContinuousScalar2ndOrder),
    }
    .map_err(|e| config_err(s, e))?;

    let mut controller = ControllerConfig::new(dims, q.clone(), r.clone(), sdc_variant, control_mode(mode));
    controller.tau = c.tau;
    if let Some(u0) = &c.u0 {
        controller.u0 = Vector::from(u0.clone());
    }
    controller.singular_fallback = match c.singular_fallback {
        FallbackName::Discontinuous => SingularFallback::Discontinuous,
        FallbackName::Adrc => SingularFallback::Adrc,
    };
    controller.dwell_steps = c.dwell_steps;
    controller.max_switches = c.max_switches;
    controller.k_out = k_out;

    if controller.mode == ControlMode::Switching {
        let sign = match c.closed_loop_sign {
            SignName::Corrected => ClosedLoopSign::Corrected,
            SignName::AsPrinted => ClosedLoopSign::AsPrinted,
        };
        let roa = match (&plant.df0, &plant.b0_true) {
            (Some(df0), Some(b0)) => roa_closed_loop_jacobian(dims, df0, b0, &q, &r, sign).map_err(|e| e.to_string()),
            _ => Err("plant has no linearization at the origin".to_string()),
        };
        match roa {
            Ok(roa) => controller.roa = Some(roa),
            Err(reason) => {
                warn!("{}: ROA estimate unavailable ({reason}); switching degrades to ADRC only", s.name);
                controller.mode = ControlMode::AdrcOnly;
            }
        }
    }

    Ok(SimConfig {
        t_final: s.simulation.t_final,
        dt: s.simulation.dt,
        x0: x0.into(),
        eso,
        controller,
        eso_init,
    })
}

/// Runs one configuration and summarizes it.
pub fn simulate(
    s: &Scenario,
    plant: &Plant,
    label: &str,
    mode: ModeName,
    cfg: &SimConfig,
) -> Result<(TrajectoryLog, RunSummary), CliError> {
    let context = format!("{}/{label}", s.name);
    let start = Instant::now();
    let log = run(plant, cfg).map_err(|e| CliError::from_sim(&context, e))?;
    let wall = start.elapsed();
    let summary = RunSummary::from_log(label, mode, &log, cfg.controller.max_switches, wall);
    if summary.chattering {
        warn!("{context}: {} mode switches exceed the limit of {}", summary.switch_count, cfg.controller.max_switches);
    }
    info!("{context}: J = {:.6}, |x| = {:.3e}", summary.final_cost, summary.final_norm);
    Ok((log, summary))
}

fn csv_path(out: &Path, s: &Scenario, label: &str) -> PathBuf {
    out.join(format!("{}_{label}.csv", s.name))
}

fn ensure_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.display().to_string(),
        source,
    })
}

/// Single run in the scenario's (or the overriding) mode; writes one CSV.
pub fn run_scenario(s: &Scenario, out: &Path, mode: Option<ModeName>) -> Result<RunSummary, CliError> {
    let mode = mode.unwrap_or(s.controller.mode);
    let plant = build_plant(s)?;
    let cfg = build_config(s, &plant, mode, None, None)?;
    let (log, summary) = simulate(s, &plant, mode.as_str(), mode, &cfg)?;
    ensure_dir(out)?;
    write_csv(&log, plant.dims, &csv_path(out, s, mode.as_str()))?;
    Ok(summary)
}

/// ADRC gains of the sweep: one per `Q` scale, then the explicit ones.
pub fn sweep_gains(s: &Scenario, plant: &Plant) -> Result<Vec<(String, Matrix)>, CliError> {
    let sweep = s.sweep.as_ref().ok_or_else(|| CliError::Config {
        context: s.name.clone(),
        message: "sweep: section required for compare".into(),
    })?;
    if sweep.q_scales.is_empty() && sweep.gains.is_empty() {
        return Err(CliError::Config {
            context: s.name.clone(),
            message: "sweep.q_scales: the ADRC sweep is empty".into(),
        });
    }
    let q = matrix(&s.controller.q);
    let r = matrix(&s.controller.r);
    let mut gains = Vec::new();
    for (i, scale) in sweep.q_scales.iter().enumerate() {
        let k = adrc_gain(plant.dims, &q.scale(*scale), &r).map_err(|e| CliError::Solver {
            context: s.name.clone(),
            message: e.to_string(),
        })?;
        gains.push((format!("adrc_{i}"), k.k));
    }
    let offset = sweep.q_scales.len();
    for (i, g) in sweep.gains.iter().enumerate() {
        gains.push((format!("adrc_{}", offset + i), matrix(g)));
    }
    Ok(gains)
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

/// Switching, SDRE+ESO and the ADRC family from the same initial condition.
pub fn compare(s: &Scenario, out: &Path) -> Result<CompareReport, CliError> {
    let plant = build_plant(s)?;
    let gains = sweep_gains(s, &plant)?;
    let workers = s.sweep.as_ref().map_or(0, |w| w.workers);

    let mut jobs: Vec<(String, ModeName, Option<Matrix>)> = vec![
        ("switching".into(), ModeName::Switching, None),
        ("sdre".into(), ModeName::Sdre, None),
    ];
    jobs.extend(gains.into_iter().map(|(label, k)| (label, ModeName::Adrc, Some(k))));

    let results: Vec<Result<(TrajectoryLog, RunSummary), CliError>> = pool(workers).install(|| {
        jobs.par_iter()
            .map(|(label, mode, k)| {
                let cfg = build_config(s, &plant, *mode, None, k.clone())?;
                simulate(s, &plant, label, *mode, &cfg)
            })
            .collect()
    });

    ensure_dir(out)?;
    let mut runs = Vec::new();
    let mut adrc_logs = Vec::new();
    for ((label, mode, _), res) in jobs.iter().zip(results) {
        let (log, summary) = res?;
        write_csv(&log, plant.dims, &csv_path(out, s, label))?;
        if *mode == ModeName::Adrc {
            adrc_logs.push(log);
        }
        runs.push(summary);
    }
    write_envelope(&adrc_logs, &out.join(format!("{}_envelope.csv", s.name)))?;
    Ok(CompareReport::new(runs))
}

/// Randomized initial conditions around the scenario's, seeded by run index.
pub fn seed_sweep(s: &Scenario, out: &Path, mode: Option<ModeName>, count: usize) -> Result<SweepReport, CliError> {
    let mode = mode.unwrap_or(s.controller.mode);
    let plant = build_plant(s)?;
    let workers = s.sweep.as_ref().map_or(0, |w| w.workers);
    let x_ref = s.simulation.x0.clone();

    let results: Vec<Result<(TrajectoryLog, RunSummary), CliError>> = pool(workers).install(|| {
        (0..count)
            .into_par_iter()
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
                let x0: Vec<f64> = x_ref
                    .iter()
                    .map(|v| {
                        let span = 2.0 * v.abs() + 0.1;
                        rng.gen_range(-span..=span)
                    })
                    .collect();
                let cfg = build_config(s, &plant, mode, Some(&x0), None)?;
                simulate(s, &plant, &format!("seed_{seed}"), mode, &cfg)
            })
            .collect()
    });

    ensure_dir(out)?;
    let mut runs = Vec::new();
    for (seed, res) in results.into_iter().enumerate() {
        let (log, summary) = res?;
        write_csv(&log, plant.dims, &csv_path(out, s, &format!("seed_{seed}")))?;
        runs.push(summary);
    }
    Ok(SweepReport { runs })
}
