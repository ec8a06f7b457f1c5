//! Three-mode switching stabilizer.
//!
//! ```text
//! u = u₀                      t < τ            (start-up)
//!     −K_in(x̂)·x̂              x̂ ∈ Ω̂            (SDRE+ESO)
//!     −Ĝ⁻¹(x̂)(K_out·x̂ + x̂ₖ₊₁)  otherwise        (ADRC)
//! ```
//!
//! `K_in(x̂)` comes from the CARE of the estimated SDC pair `(Â(x̂), B̂(x̂))`,
//! re-solved at every evaluation. `K_out` is the LQR gain of the chain of
//! integrators of the same size. `Ω̂` is the set where the quadratic form
//! `V = ½x̂ᵀPx̂` decreases along the estimated SDRE closed loop, with `P` taken
//! from the linearization at the origin.

use log::{debug, warn};
use thiserror::Error;

use crate::eso::InputMatrixFn;
use crate::matops::{MatError, Matrix, Vector};
use crate::riccati::{
    bootstrap_stabilizing_gain, is_hurwitz, is_positive_definite, solve_care, solve_lyapunov, CareProblem,
    CareSolution, RiccatiError,
};
use crate::sdc::{assemble, chain_integrator, Estimate, SdcError, SdcFactorization, SdcVariant, SystemDims};

/// Right-hand side weight of the Lyapunov equation that defines the ROA
/// matrix `P`.
pub const ROA_LYAPUNOV_WEIGHT: f64 = 1e-6;
pub const DEFAULT_MAX_SWITCHES: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("controller configuration: {0}")]
    Config(String),
    #[error("SDC construction failed: {0}")]
    Sdc(#[from] SdcError),
    #[error("Riccati solver failed: {0}")]
    Riccati(#[from] RiccatiError),
    #[error("input matrix Ĝ(x̂) is singular: {0}")]
    SingularInput(MatError),
    #[error("region-of-attraction construction failed: {0}")]
    Roa(String),
    #[error(transparent)]
    Mat(#[from] MatError),
}

/// Which control laws the supervisor may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlMode {
    Switching,
    /// SDRE+ESO everywhere, i.e. `Ω̂` is the whole state space.
    SdreEsoOnly,
    AdrcOnly,
}

/// Law applied at one instant; the discriminant is the CSV mode code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActiveMode {
    Startup = 0,
    SdreEso = 1,
    Adrc = 2,
}

impl ActiveMode {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Startup => "startup",
            Self::SdreEso => "sdre_eso",
            Self::Adrc => "adrc",
        }
    }
}

/// Sign of the feedback term in `J_CL(0) = J(0) ∓ B R⁻¹ Bᵀ P_in(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClosedLoopSign {
    /// `J(0) − B R⁻¹BᵀP_in(0)`, consistent with `u = −K_in x`.
    #[default]
    Corrected,
    /// `J(0) + B R⁻¹BᵀP_in(0)`, kept for comparison.
    AsPrinted,
}

/// What to do when a continuous SDC variant hits a (near-)zero coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingularFallback {
    /// Build `F̂` with the switching variant (unit parameters) for that step.
    #[default]
    Discontinuous,
    /// Use the ADRC law for that step.
    Adrc,
}

/// ROA matrix `P` and the closed-loop Jacobian it certifies.
#[derive(Debug, Clone, PartialEq)]
pub struct RoaData {
    pub p: Matrix,
    pub j_cl0: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub dims: SystemDims,
    pub q: Matrix,
    pub r: Matrix,
    pub sdc_variant: SdcVariant,
    pub tau: f64,
    pub u0: Vector,
    pub mode: ControlMode,
    pub roa: Option<RoaData>,
    /// Explicit ADRC gain; the chain-integrator LQR gain for `(Q, R)` when
    /// absent.
    pub k_out: Option<Matrix>,
    pub singular_fallback: SingularFallback,
    /// Decisions to hold a newly entered mode before another switch.
    pub dwell_steps: usize,
    /// Chattering threshold on the number of mode changes in one run.
    pub max_switches: usize,
}

impl ControllerConfig {
    /// Defaults: `τ = 0`, `u₀ = 0`, no ROA, no dwell.
    pub fn new(dims: SystemDims, q: Matrix, r: Matrix, sdc_variant: SdcVariant, mode: ControlMode) -> Self {
        Self {
            dims,
            q,
            r,
            sdc_variant,
            tau: 0.0,
            u0: Vector::zeros(dims.n()),
            mode,
            roa: None,
            k_out: None,
            singular_fallback: SingularFallback::default(),
            dwell_steps: 0,
            max_switches: DEFAULT_MAX_SWITCHES,
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let (total, n) = (self.dims.state_dim(), self.dims.n());
        if self.q.shape() != (total, total) || !is_positive_definite(&self.q) {
            return Err(ControlError::Config(format!("Q must be a {total}x{total} positive definite matrix")));
        }
        if self.r.shape() != (n, n) || !is_positive_definite(&self.r) {
            return Err(ControlError::Config(format!("R must be a {n}x{n} positive definite matrix")));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(ControlError::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.u0.dim() != n || !self.u0.is_finite() {
            return Err(ControlError::Config(format!("u0 must have {n} finite entries")));
        }
        if let Some(k) = &self.k_out {
            if k.shape() != (n, total) {
                return Err(ControlError::Config(format!("K_out must be {n}x{total}")));
            }
        }
        if let Some(roa) = &self.roa {
            if roa.p.shape() != (total, total) || !is_positive_definite(&roa.p) {
                return Err(ControlError::Config("ROA matrix P must be positive definite".into()));
            }
        }
        if self.mode == ControlMode::Switching && self.roa.is_none() {
            return Err(ControlError::Config("switching mode needs ROA data".into()));
        }
        Ok(())
    }
}

/// One evaluation of the control law.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub u: Vector,
    pub active_mode: ActiveMode,
    /// Gain used for the feedback part (`K_in`, `K_out`, or zeros at start-up).
    pub k_used: Matrix,
    /// Value of `x̂ᵀP(d̂ − B̂K_in x̂)` when the ROA test ran.
    pub roa_value: Option<f64>,
    /// A tie in the switching SDC argmin was broken for this evaluation.
    pub tie: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchEvent {
    pub t: f64,
    pub from: ActiveMode,
    pub to: ActiveMode,
}

/// LQR gain of the chain of integrators, `K_out = R⁻¹B₀ᵀP_out`.
pub fn adrc_gain(dims: SystemDims, q: &Matrix, r: &Matrix) -> Result<CareSolution, ControlError> {
    let chain = chain_integrator(dims);
    let prob = CareProblem::new(chain.a_hat, chain.b_hat, q.clone(), r.clone())?;
    Ok(solve_care(&prob, None)?)
}

/// ADRC law `u = −Ĝ⁻¹(K_out·x̂ + x̂ₖ₊₁)`.
pub fn u_out(est: &Estimate, g_hat: &Matrix, k_out: &Matrix) -> Result<ControlDecision, ControlError> {
    let mut v = k_out.mul_vec(&est.xhat)?;
    for (vi, e) in v.iter_mut().zip(est.xhat_ext.iter()) {
        *vi += e;
    }
    let g_inv = g_hat.inverse().map_err(ControlError::SingularInput)?;
    let u = g_inv.mul_vec(&v)?.scaled(-1.0);
    Ok(ControlDecision {
        u,
        active_mode: ActiveMode::Adrc,
        k_used: k_out.clone(),
        roa_value: None,
        tie: false,
    })
}

/// SDRE pieces at one estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SdreGain {
    pub fact: SdcFactorization,
    pub care: CareSolution,
    pub tie: bool,
}

/// Builds `F̂`, assembles `(Â, B̂)` and solves the pointwise CARE.
///
/// `warm_p` is a previous Riccati solution; its gain seeds the Kleinman
/// iteration when it still stabilizes the new pair, otherwise the
/// companion-form bootstrap gain is used.
pub fn sdre_gain(
    est: &Estimate,
    cfg: &ControllerConfig,
    g_hat: &Matrix,
    warm_p: Option<&Matrix>,
) -> Result<SdreGain, ControlError> {
    let dims = cfg.dims;
    let eval = match cfg.sdc_variant.f_hat(est, dims) {
        Ok(e) => e,
        Err(e @ (SdcError::SingularState { .. } | SdcError::NonFinite))
            if cfg.sdc_variant.is_continuous() && cfg.singular_fallback == SingularFallback::Discontinuous =>
        {
            debug!("t={}: continuous SDC singular ({e}), using switching variant", est.t);
            SdcVariant::default_discontinuous(dims)?.f_hat(est, dims)?
        }
        Err(e) => return Err(e.into()),
    };
    let fact = assemble(&eval.f_hat, g_hat, dims)?;
    let prob = CareProblem::new(fact.a_hat.clone(), fact.b_hat.clone(), cfg.q.clone(), cfg.r.clone())?;

    let warm = warm_p.and_then(|p| {
        let r_inv = cfg.r.inverse().ok()?;
        let k = r_inv.matmul(&fact.b_hat.transpose()).ok()?.matmul(p).ok()?;
        solve_care(&prob, Some(&k)).ok()
    });
    let care = match warm {
        Some(sol) => sol,
        None => match bootstrap_stabilizing_gain(&fact.a_hat, &fact.b_hat, dims, &fact.f_hat, &fact.g_hat) {
            Ok(k0) => solve_care(&prob, Some(&k0))?,
            Err(_) => solve_care(&prob, None)?,
        },
    };
    Ok(SdreGain {
        fact,
        care,
        tie: eval.tie,
    })
}

/// `x̂ᵀP(d̂ − B̂K_in x̂)` with the estimated drift stacked as
/// `d̂ = (x̂₂, …, x̂ₖ, x̂ₖ₊₁)`.
pub fn roa_value(est: &Estimate, p: &Matrix, fact: &SdcFactorization, k_in: &Matrix) -> Result<f64, ControlError> {
    let n = est.xhat_ext.dim();
    let total = est.xhat.dim();
    let mut drift: Vec<f64> = est.xhat[n..].to_vec();
    drift.extend_from_slice(&est.xhat_ext);
    debug_assert_eq!(drift.len(), total);
    let bkx = fact.b_hat.mul_vec(&k_in.mul_vec(&est.xhat)?)?;
    let w: Vec<f64> = drift.iter().zip(bkx.iter()).map(|(d, b)| d - b).collect();
    Ok(est.xhat.dot(&p.mul_vec(&w)?))
}

/// Same quantity through the matrix product `x̂ᵀP(Â − B̂K_in)x̂`.
pub fn roa_value_product(
    est: &Estimate,
    p: &Matrix,
    fact: &SdcFactorization,
    k_in: &Matrix,
) -> Result<f64, ControlError> {
    let a_cl = fact.a_hat.sub(&fact.b_hat.matmul(k_in)?)?;
    Ok(est.xhat.dot(&p.matmul(&a_cl)?.mul_vec(&est.xhat)?))
}

/// `J(0) = [[0, I]; ∂f/∂x|₀]`.
pub fn linearization(dims: SystemDims, df0: &Matrix) -> Result<Matrix, ControlError> {
    let (n, total) = (dims.n(), dims.state_dim());
    if df0.shape() != (n, total) {
        return Err(ControlError::Config(format!(
            "∂f/∂x at 0 must be {n}x{total}, got {:?}",
            df0.shape()
        )));
    }
    let mut j = Matrix::zeros(total, total);
    for i in 0..total - n {
        j[(i, i + n)] = 1.0;
    }
    j.set_block(total - n, 0, df0);
    Ok(j)
}

/// Offline closed-loop Jacobian and ROA matrix.
///
/// 1. `J(0)` from the known drift Jacobian at the origin;
/// 2. `P_in(0)` from the CARE of `(J(0), B(0))`;
/// 3. `J_CL(0) = J(0) ∓ B(0)R⁻¹Bᵀ(0)P_in(0)`;
/// 4. `P` from `J_CLᵀP + PJ_CL + 10⁻⁶·I = 0`.
///
/// Fails unless `J_CL(0)` is Hurwitz and `P` is positive definite.
pub fn roa_closed_loop_jacobian(
    dims: SystemDims,
    df0: &Matrix,
    b0_true: &Matrix,
    q: &Matrix,
    r: &Matrix,
    sign: ClosedLoopSign,
) -> Result<RoaData, ControlError> {
    let total = dims.state_dim();
    if b0_true.shape() != (total, dims.n()) {
        return Err(ControlError::Config(format!(
            "B(0) must be {total}x{}, got {:?}",
            dims.n(),
            b0_true.shape()
        )));
    }
    let j0 = linearization(dims, df0)?;
    let prob = CareProblem::new(j0.clone(), b0_true.clone(), q.clone(), r.clone())?;
    let p_in = solve_care(&prob, None)?.p;
    let r_inv = r.inverse()?;
    let feedback = b0_true.matmul(&r_inv)?.matmul(&b0_true.transpose())?.matmul(&p_in)?;
    let j_cl0 = match sign {
        ClosedLoopSign::Corrected => j0.sub(&feedback)?,
        ClosedLoopSign::AsPrinted => j0.add(&feedback)?,
    };
    if !is_hurwitz(&j_cl0) {
        return Err(ControlError::Roa(format!("J_CL(0) is not Hurwitz:\n{j_cl0}")));
    }
    let p = solve_lyapunov(&j_cl0, &Matrix::identity(total).scale(ROA_LYAPUNOV_WEIGHT))?;
    if !is_positive_definite(&p) {
        return Err(ControlError::Roa("ROA matrix P is not positive definite".into()));
    }
    Ok(RoaData { p, j_cl0 })
}

/// Stateful supervisor: owns the warm-start cache and the switch history of
/// one simulation.
pub struct Controller {
    cfg: ControllerConfig,
    g_hat: InputMatrixFn,
    k_out: Matrix,
    warm_p: Option<Matrix>,
    last_mode: Option<ActiveMode>,
    hold: usize,
    switch_events: Vec<SwitchEvent>,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("cfg", &self.cfg)
            .field("k_out", &self.k_out)
            .field("last_mode", &self.last_mode)
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(cfg: ControllerConfig, g_hat: InputMatrixFn) -> Result<Self, ControlError> {
        cfg.validate()?;
        let k_out = match &cfg.k_out {
            Some(k) => k.clone(),
            None => adrc_gain(cfg.dims, &cfg.q, &cfg.r)?.k,
        };
        Ok(Self {
            cfg,
            g_hat,
            k_out,
            warm_p: None,
            last_mode: None,
            hold: 0,
            switch_events: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn k_out(&self) -> &Matrix {
        &self.k_out
    }

    pub fn switch_events(&self) -> &[SwitchEvent] {
        &self.switch_events
    }

    pub fn g_hat_at(&self, xhat: &[f64]) -> Matrix {
        (self.g_hat)(xhat)
    }

    /// SDRE+ESO law `u = −K_in(x̂)·x̂`.
    pub fn u_in(&mut self, est: &Estimate) -> Result<ControlDecision, ControlError> {
        let (decision, _) = self.u_in_with_gain(est)?;
        Ok(decision)
    }

    fn u_in_with_gain(&mut self, est: &Estimate) -> Result<(ControlDecision, SdreGain), ControlError> {
        let g = self.g_hat_at(&est.xhat);
        let gain = sdre_gain(est, &self.cfg, &g, self.warm_p.as_ref())?;
        self.warm_p = Some(gain.care.p.clone());
        let u = gain.care.k.mul_vec(&est.xhat)?.scaled(-1.0);
        Ok((
            ControlDecision {
                u,
                active_mode: ActiveMode::SdreEso,
                k_used: gain.care.k.clone(),
                roa_value: None,
                tie: gain.tie,
            },
            gain,
        ))
    }

    pub fn u_out(&self, est: &Estimate) -> Result<ControlDecision, ControlError> {
        u_out(est, &self.g_hat_at(&est.xhat), &self.k_out)
    }

    /// Membership of `x̂` in `Ω̂` and the value of the defining quadratic form.
    /// The boundary `v = 0` counts as outside.
    pub fn roa_contains(&mut self, est: &Estimate) -> Result<(bool, f64), ControlError> {
        let p = self
            .cfg
            .roa
            .as_ref()
            .ok_or_else(|| ControlError::Config("ROA data missing".into()))?
            .p
            .clone();
        let (_, gain) = self.u_in_with_gain(est)?;
        let v = roa_value(est, &p, &gain.fact, &gain.care.k)?;
        Ok((v < 0.0, v))
    }

    /// Evaluates the switching law at `est.t`.
    pub fn decide(&mut self, est: &Estimate) -> Result<ControlDecision, ControlError> {
        let decision = self.select(est)?;
        if let Some(prev) = self.last_mode {
            if prev != decision.active_mode {
                self.switch_events.push(SwitchEvent {
                    t: est.t,
                    from: prev,
                    to: decision.active_mode,
                });
                self.hold = self.cfg.dwell_steps;
            } else if self.hold > 0 {
                self.hold -= 1;
            }
        }
        self.last_mode = Some(decision.active_mode);
        Ok(decision)
    }

    fn select(&mut self, est: &Estimate) -> Result<ControlDecision, ControlError> {
        if est.t < self.cfg.tau {
            return Ok(ControlDecision {
                u: self.cfg.u0.clone(),
                active_mode: ActiveMode::Startup,
                k_used: Matrix::zeros(self.cfg.dims.n(), self.cfg.dims.state_dim()),
                roa_value: None,
                tie: false,
            });
        }
        match self.cfg.mode {
            ControlMode::AdrcOnly => self.u_out(est),
            ControlMode::SdreEsoOnly => match self.u_in(est) {
                Ok(d) => Ok(d),
                Err(e) => {
                    warn!("t={}: SDRE+ESO unavailable ({e}), falling back to ADRC", est.t);
                    self.u_out(est)
                }
            },
            ControlMode::Switching => {
                let p = match &self.cfg.roa {
                    Some(roa) => roa.p.clone(),
                    None => return Err(ControlError::Config("ROA data missing".into())),
                };
                let (mut inner, gain) = match self.u_in_with_gain(est) {
                    Ok(v) => v,
                    Err(e) => {
                        warn!("t={}: SDRE+ESO unavailable ({e}), falling back to ADRC", est.t);
                        return self.u_out(est);
                    }
                };
                let v = roa_value(est, &p, &gain.fact, &gain.care.k)?;
                let held = (self.hold > 0).then_some(self.last_mode).flatten();
                let use_inner = match held {
                    Some(ActiveMode::SdreEso) => true,
                    Some(ActiveMode::Adrc) => false,
                    _ => v < 0.0,
                };
                if use_inner {
                    inner.roa_value = Some(v);
                    Ok(inner)
                } else {
                    let mut outer = self.u_out(est)?;
                    outer.roa_value = Some(v);
                    outer.tie = inner.tie;
                    Ok(outer)
                }
            }
        }
    }
}
