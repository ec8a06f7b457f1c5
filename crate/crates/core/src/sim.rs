//! Plant models and fixed-step closed-loop simulation.
//!
//! Plant, observer and controller are advanced together: the plant state and
//! the observer state are stacked into one vector and integrated with
//! classical RK4, while the control input is evaluated once per step and held
//! constant over it.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::controller::{ActiveMode, ControlDecision, ControlError, Controller, ControllerConfig, SwitchEvent};
use crate::eso::{eso_derivative, EsoConfig, EsoError, EsoState, InputMatrixFn};
use crate::matops::{Matrix, Vector};
use crate::sdc::{Estimate, SystemDims};

/// Divergence guard on the Euclidean norm of the plant state.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub type DriftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("simulation configuration: {0}")]
    Config(String),
    #[error("plant parameter: {0}")]
    Parameter(String),
    #[error("trajectory diverged at t={t}: state {state:?}")]
    Divergence {
        t: f64,
        state: Vec<f64>,
        /// Rows logged up to the failure point.
        log: Option<Box<TrajectoryLog>>,
    },
    #[error("controller failed at t={t}: {source}")]
    Control {
        t: f64,
        #[source]
        source: ControlError,
        log: Option<Box<TrajectoryLog>>,
    },
    #[error("observer: {0}")]
    Eso(#[from] EsoError),
}

impl SimError {
    /// Partial trajectory carried by divergence and controller failures.
    pub fn partial_log(&self) -> Option<&TrajectoryLog> {
        match self {
            Self::Divergence { log, .. } | Self::Control { log, .. } => log.as_deref(),
            _ => None,
        }
    }
}

/// `ẋᵢ = xᵢ₊₁` for `i < k`, `ẋₖ = f(x) + G(x)u`.
#[derive(Clone)]
pub struct Plant {
    pub name: String,
    pub dims: SystemDims,
    pub f: DriftFn,
    pub g: InputMatrixFn,
    pub g_hat: InputMatrixFn,
    /// `∂f/∂x` at the origin, `n × kn`.
    pub df0: Option<Matrix>,
    /// `[0; G(0)]`, `kn × n`.
    pub b0_true: Option<Matrix>,
}

impl fmt::Debug for Plant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plant")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("df0", &self.df0)
            .field("b0_true", &self.b0_true)
            .finish_non_exhaustive()
    }
}

impl Plant {
    /// Full state derivative for input `u`.
    pub fn derivative(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.dims.n();
        let total = self.dims.state_dim();
        let mut dx = Vec::with_capacity(total);
        dx.extend_from_slice(&x[n..]);
        let fx = (self.f)(x);
        let gx = (self.g)(x);
        for i in 0..n {
            let gu: f64 = (0..n).map(|j| gx[(i, j)] * u[j]).sum();
            dx.push(fx[i] + gu);
        }
        dx
    }

    /// Checks `f(0) = 0`, then at every sample: `G(x)` invertible and
    /// `sgn(vᵀĜv) = sgn(vᵀGv)` for the probe `v = x`.
    pub fn check_invariants(&self, samples: &[Vec<f64>]) -> Result<(), SimError> {
        let total = self.dims.state_dim();
        let f0 = (self.f)(&vec![0.0; total]);
        if f0.iter().any(|v| v.abs() > 1e-12) {
            return Err(SimError::Parameter(format!("{}: f(0) = {f0:?}", self.name)));
        }
        let n = self.dims.n();
        for x in samples {
            let g = (self.g)(x);
            let gh = (self.g_hat)(x);
            if g.inverse().is_err() {
                return Err(SimError::Parameter(format!("{}: G singular at {x:?}", self.name)));
            }
            let v: Vec<f64> = (0..n).map(|i| x[i] + 1.0).collect();
            let quad = |m: &Matrix| v.iter().zip(m.mul_vec(&v).unwrap().iter()).map(|(a, b)| a * b).sum::<f64>();
            if quad(&g).signum() != quad(&gh).signum() {
                return Err(SimError::Parameter(format!("{}: sign of Ĝ differs from G at {x:?}", self.name)));
            }
        }
        Ok(())
    }
}

/// Damped inverted pendulum, `ẍ = (g/l)·sin x₁ − b·x₂ + cos(x₁)/l · u`.
pub fn pendulum_plant(g: f64, l: f64, b: f64) -> Result<Plant, SimError> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(SimError::Parameter(format!("pendulum length must be > 0, got {l}")));
    }
    if !g.is_finite() || !b.is_finite() {
        return Err(SimError::Parameter("pendulum parameters must be finite".into()));
    }
    let dims = SystemDims::new(2, 1).expect("valid dimensions");
    let gl = g / l;
    Ok(Plant {
        name: "pendulum".into(),
        dims,
        f: Arc::new(move |x| vec![gl * x[0].sin() - b * x[1]]),
        g: Arc::new(move |x| Matrix::scalar(x[0].cos() / l)),
        g_hat: Arc::new(|x| Matrix::scalar(x[0].cos().signum())),
        df0: Some(Matrix::row(&[gl, -b])),
        b0_true: Some(Matrix::column(&[0.0, 1.0 / l])),
    })
}

/// `x⁽ᵏ⁾ = u` with `G = Ĝ = I`.
pub fn chain_integrator_plant(dims: SystemDims) -> Plant {
    let (n, total) = (dims.n(), dims.state_dim());
    let mut b0 = Matrix::zeros(total, n);
    b0.set_block(total - n, 0, &Matrix::identity(n));
    Plant {
        name: "chain_integrator".into(),
        dims,
        f: Arc::new(move |_| vec![0.0; n]),
        g: Arc::new(move |_| Matrix::identity(n)),
        g_hat: Arc::new(move |_| Matrix::identity(n)),
        df0: Some(Matrix::zeros(n, total)),
        b0_true: Some(b0),
    }
}

/// One classical Runge–Kutta step of `ẏ = deriv(t, y)`.
pub fn rk4_step<F>(mut deriv: F, y: &[f64], t: f64, dt: f64) -> Result<Vec<f64>, SimError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, SimError>,
{
    let mut eval = |tt: f64, yy: &[f64]| -> Result<Vec<f64>, SimError> {
        let d = deriv(tt, yy)?;
        if d.len() != yy.len() {
            return Err(SimError::Config(format!("derivative has {} entries, state {}", d.len(), yy.len())));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Divergence {
                t: tt,
                state: yy.to_vec(),
                log: None,
            });
        }
        Ok(d)
    };
    let axpy = |h: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = eval(t, y)?;
    let k2 = eval(t + 0.5 * dt, &axpy(0.5 * dt, &k1))?;
    let k3 = eval(t + 0.5 * dt, &axpy(0.5 * dt, &k2))?;
    let k4 = eval(t + dt, &axpy(dt, &k3))?;
    Ok((0..y.len())
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub t_final: f64,
    pub dt: f64,
    pub x0: Vector,
    pub eso: EsoConfig,
    pub controller: ControllerConfig,
    pub eso_init: EsoState,
}

impl SimConfig {
    pub fn validate(&self, plant: &Plant) -> Result<(), SimError> {
        let dims = plant.dims;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt && self.t_final.is_finite()) {
            return Err(SimError::Config(format!(
                "t_final must be >= dt, got t_final={} dt={}",
                self.t_final, self.dt
            )));
        }
        if let Some(eps) = self.eso.epsilon() {
            if self.dt > eps / 10.0 * (1.0 + 1e-12) {
                return Err(SimError::Config(format!(
                    "dt={} exceeds epsilon/10 = {} for the high-gain observer",
                    self.dt,
                    eps / 10.0
                )));
            }
        }
        if self.x0.dim() != dims.state_dim() || !self.x0.is_finite() {
            return Err(SimError::Config(format!("x0 must have {} finite entries", dims.state_dim())));
        }
        if self.eso.dims != dims || self.controller.dims != dims {
            return Err(SimError::Config("observer/controller dimensions differ from the plant".into()));
        }
        if self.eso_init.xhat.dim() != dims.state_dim() || self.eso_init.xhat_ext.dim() != dims.n() {
            return Err(SimError::Config("initial observer state has the wrong dimension".into()));
        }
        self.eso.validate()?;
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub xhat_ext: Vec<f64>,
    pub u: Vec<f64>,
    pub mode: ActiveMode,
    /// Cost accumulated on `[0, t]`.
    pub j: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    pub switch_events: Vec<SwitchEvent>,
    pub tie_events: usize,
}

impl TrajectoryLog {
    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn final_cost(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.j)
    }

    pub fn switch_count(&self) -> usize {
        self.switch_events.len()
    }

    /// Largest `‖x‖₂ + ‖u‖₂` over the run.
    pub fn gamma(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| Vector::from(r.x.as_slice()).norm2() + Vector::from(r.u.as_slice()).norm2())
            .fold(0.0, f64::max)
    }

    pub fn max_u(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| Vector::from(r.u.as_slice()).norm2())
            .fold(0.0, f64::max)
    }

    /// Largest `‖x̂ − x‖∞` over rows with `t ≥ t_from`.
    pub fn max_estimation_error(&self, t_from: f64) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.t >= t_from)
            .flat_map(|r| r.x.iter().zip(&r.xhat).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

/// Source of the control input inside [`run_with_law`].
pub trait ControlLaw {
    /// `x` is the true plant state, available to laws used in open-loop tests.
    fn decide(&mut self, est: &Estimate, x: &[f64]) -> Result<ControlDecision, ControlError>;

    fn switch_events(&self) -> &[SwitchEvent] {
        &[]
    }
}

impl ControlLaw for Controller {
    fn decide(&mut self, est: &Estimate, _x: &[f64]) -> Result<ControlDecision, ControlError> {
        Controller::decide(self, est)
    }

    fn switch_events(&self) -> &[SwitchEvent] {
        Controller::switch_events(self)
    }
}

/// Open-loop input `u(t)`, logged as ADRC mode.
pub struct OpenLoop<F: FnMut(f64) -> Vec<f64>> {
    pub input: F,
    n: usize,
    total: usize,
}

impl<F: FnMut(f64) -> Vec<f64>> OpenLoop<F> {
    pub fn new(dims: SystemDims, input: F) -> Self {
        Self {
            input,
            n: dims.n(),
            total: dims.state_dim(),
        }
    }
}

impl<F: FnMut(f64) -> Vec<f64>> ControlLaw for OpenLoop<F> {
    fn decide(&mut self, est: &Estimate, _x: &[f64]) -> Result<ControlDecision, ControlError> {
        Ok(ControlDecision {
            u: (self.input)(est.t).into(),
            active_mode: ActiveMode::Adrc,
            k_used: Matrix::zeros(self.n, self.total),
            roa_value: None,
            tie: false,
        })
    }
}

/// Closed loop under the switching controller built from `cfg.controller`.
pub fn run(plant: &Plant, cfg: &SimConfig) -> Result<TrajectoryLog, SimError> {
    cfg.validate(plant)?;
    let mut ctrl = Controller::new(cfg.controller.clone(), plant.g_hat.clone())
        .map_err(|source| SimError::Control { t: 0.0, source, log: None })?;
    run_with_law(plant, cfg, &mut ctrl)
}

/// Closed loop under an arbitrary control law; `cfg.controller` supplies the
/// cost weights.
pub fn run_with_law<L: ControlLaw>(plant: &Plant, cfg: &SimConfig, law: &mut L) -> Result<TrajectoryLog, SimError> {
    cfg.validate(plant)?;
    let dims = plant.dims;
    let total = dims.state_dim();
    let (q, r) = (&cfg.controller.q, &cfg.controller.r);
    let stage_cost = |x: &[f64], u: &[f64]| -> f64 {
        let xq = q.mul_vec(x).expect("Q shape validated");
        let ur = r.mul_vec(u).expect("R shape validated");
        0.5 * (Vector::from(x).dot(&xq) + Vector::from(u).dot(&ur))
    };

    let mut y: Vec<f64> = cfg.x0.to_vec();
    y.extend(cfg.eso_init.stacked());
    let steps = cfg.steps();
    let mut log = TrajectoryLog {
        rows: Vec::with_capacity(steps + 1),
        ..Default::default()
    };
    let mut j = 0.0;
    let mut prev_stage = 0.0;

    for m in 0..=steps {
        let t = m as f64 * cfg.dt;
        let (x, obs) = y.split_at(total);
        let state = EsoState::from_stacked(dims, obs);
        let est = state.to_estimate(t);
        let decision = match law.decide(&est, x) {
            Ok(d) => d,
            Err(source) => {
                log.switch_events = law.switch_events().to_vec();
                return Err(SimError::Control {
                    t,
                    source,
                    log: Some(Box::new(log)),
                });
            }
        };
        let u = decision.u.into_inner();
        let stage = stage_cost(x, &u);
        if m > 0 {
            j += 0.5 * cfg.dt * (prev_stage + stage);
        }
        prev_stage = stage;
        if decision.tie {
            log.tie_events += 1;
        }
        log.rows.push(LogRow {
            t,
            x: x.to_vec(),
            xhat: state.xhat.to_vec(),
            xhat_ext: state.xhat_ext.to_vec(),
            u: u.clone(),
            mode: decision.active_mode,
            j,
        });
        if m == steps {
            break;
        }

        let field = |_: f64, yy: &[f64]| -> Result<Vec<f64>, SimError> {
            let (xx, oo) = yy.split_at(total);
            let mut d = plant.derivative(xx, &u);
            let obs = EsoState::from_stacked(dims, oo);
            let n = dims.n();
            let dobs = eso_derivative(&obs, &xx[..n], &u, &cfg.eso)?;
            d.extend(dobs.stacked());
            Ok(d)
        };
        match rk4_step(field, &y, t, cfg.dt) {
            Ok(next) => y = next,
            Err(SimError::Divergence { .. } | SimError::Eso(EsoError::NonFinite)) => {
                log.switch_events = law.switch_events().to_vec();
                return Err(SimError::Divergence {
                    t,
                    state: y[..total].to_vec(),
                    log: Some(Box::new(log)),
                });
            }
            Err(e) => return Err(e),
        }
        let norm = Vector::from(&y[..total]).norm2();
        if !(norm <= DIVERGENCE_LIMIT) {
            log.switch_events = law.switch_events().to_vec();
            return Err(SimError::Divergence {
                t: t + cfg.dt,
                state: y[..total].to_vec(),
                log: Some(Box::new(log)),
            });
        }
    }
    log.switch_events = law.switch_events().to_vec();
    Ok(log)
}
