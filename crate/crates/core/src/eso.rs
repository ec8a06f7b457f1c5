//! Extended state observer.
//!
//! Estimates the stacked state `x̂ = (x̂₁, …, x̂ₖ)` and the extended state
//! `x̂ₖ₊₁`, which tracks the total unknown dynamics `ẋₖ − Ĝ(x)u`, from the
//! output `y = x₁` and the applied input:
//!
//! ```text
//! dx̂ᵢ   = x̂ᵢ₊₁ + eᵢ(y − x̂₁)            i < k
//! dx̂ₖ   = x̂ₖ₊₁ + eₖ(y − x̂₁) + Ĝ(x̂)u
//! dx̂ₖ₊₁ = eₖ₊₁(y − x̂₁)
//! ```

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::matops::{Matrix, Vector};
use crate::sdc::{Estimate, SystemDims};

/// State-dependent input matrix `x ↦ Ĝ(x) ∈ R^{n×n}`.
pub type InputMatrixFn = Arc<dyn Fn(&[f64]) -> Matrix + Send + Sync>;

/// Custom injection `eᵢ(v)`; called with the 1-based index `i ∈ 1..=k+1`.
pub type GainFn = Arc<dyn Fn(usize, &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EsoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid observer configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite observer input or derivative")]
    NonFinite,
}

#[derive(Clone)]
pub enum GainKind {
    /// `eᵢ(v) = cᵢ·v / εⁱ`.
    LinearHighGain { epsilon: f64, coefficients: Vec<f64> },
    Custom(GainFn),
}

impl fmt::Debug for GainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LinearHighGain { epsilon, coefficients } => f
                .debug_struct("LinearHighGain")
                .field("epsilon", epsilon)
                .field("coefficients", coefficients)
                .finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Where the observer evaluates `Ĝ` in its k-th channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GHatArgument {
    /// `Ĝ(x̂)`.
    #[default]
    Estimate,
    /// `Ĝ` at `x̂` with the first block replaced by the measurement `y`.
    Measurement,
}

#[derive(Clone)]
pub struct EsoConfig {
    pub dims: SystemDims,
    pub gain: GainKind,
    pub g_hat: InputMatrixFn,
    pub g_hat_argument: GHatArgument,
}

impl fmt::Debug for EsoConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EsoConfig")
            .field("dims", &self.dims)
            .field("gain", &self.gain)
            .field("g_hat_argument", &self.g_hat_argument)
            .finish_non_exhaustive()
    }
}

/// Coefficients of `(s + 1)^{k+1}` below the leading term, i.e. the binomial
/// coefficients `C(k+1, i)` for `i = 1..=k+1`. For `k = 2` this is `(3, 3, 1)`.
pub fn default_coefficients(k: usize) -> Vec<f64> {
    let m = k + 1;
    let mut c = Vec::with_capacity(m);
    let mut v = 1.0;
    for i in 1..=m {
        v = v * (m - i + 1) as f64 / i as f64;
        c.push(v);
    }
    c
}

impl EsoConfig {
    pub fn linear(
        dims: SystemDims,
        epsilon: f64,
        coefficients: Vec<f64>,
        g_hat: InputMatrixFn,
    ) -> Result<Self, EsoError> {
        let cfg = Self {
            dims,
            gain: GainKind::LinearHighGain {
                epsilon,
                coefficients,
            },
            g_hat,
            g_hat_argument: GHatArgument::Estimate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EsoError> {
        if let GainKind::LinearHighGain { epsilon, coefficients } = &self.gain {
            if !(*epsilon > 0.0 && epsilon.is_finite()) {
                return Err(EsoError::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
            }
            if coefficients.len() != self.dims.k() + 1 {
                return Err(EsoError::InvalidConfig(format!(
                    "need k+1 = {} coefficients, got {}",
                    self.dims.k() + 1,
                    coefficients.len()
                )));
            }
            if coefficients.iter().any(|c| !c.is_finite()) {
                return Err(EsoError::InvalidConfig("coefficients must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn epsilon(&self) -> Option<f64> {
        match &self.gain {
            GainKind::LinearHighGain { epsilon, .. } => Some(*epsilon),
            GainKind::Custom(_) => None,
        }
    }

    /// Effective linear gains `cᵢ/εⁱ`, `i = 1..=k+1`.
    pub fn linear_gains(&self) -> Option<Vec<f64>> {
        match &self.gain {
            GainKind::LinearHighGain { epsilon, coefficients } => Some(
                coefficients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c / epsilon.powi(i as i32 + 1))
                    .collect(),
            ),
            GainKind::Custom(_) => None,
        }
    }

    fn injection(&self, i: usize, err: &[f64], linear: Option<&[f64]>) -> Vec<f64> {
        match (&self.gain, linear) {
            (GainKind::LinearHighGain { .. }, Some(l)) => err.iter().map(|e| l[i - 1] * e).collect(),
            (GainKind::Custom(g), _) => g(i, err),
            _ => unreachable!("linear gains are precomputed for the linear kind"),
        }
    }
}

/// Observer state `(x̂, x̂ₖ₊₁)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EsoState {
    pub xhat: Vector,
    pub xhat_ext: Vector,
}

impl EsoState {
    pub fn to_estimate(&self, t: f64) -> Estimate {
        Estimate {
            xhat: self.xhat.clone(),
            xhat_ext: self.xhat_ext.clone(),
            t,
        }
    }

    /// `[x̂; x̂ₖ₊₁]` as one vector.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.xhat.to_vec();
        v.extend_from_slice(&self.xhat_ext);
        v
    }

    pub fn from_stacked(dims: SystemDims, v: &[f64]) -> Self {
        let total = dims.state_dim();
        Self {
            xhat: v[..total].into(),
            xhat_ext: v[total..total + dims.n()].into(),
        }
    }
}

/// Builds an initial observer state, checking dimensions.
pub fn initialize(dims: SystemDims, x0_guess: &[f64], ext_guess: &[f64]) -> Result<EsoState, EsoError> {
    if x0_guess.len() != dims.state_dim() || ext_guess.len() != dims.n() {
        return Err(EsoError::Dimension(format!(
            "initial estimate needs {} + {} entries, got {} + {}",
            dims.state_dim(),
            dims.n(),
            x0_guess.len(),
            ext_guess.len()
        )));
    }
    Ok(EsoState {
        xhat: x0_guess.into(),
        xhat_ext: ext_guess.into(),
    })
}

/// Time derivative of the observer state for measurement `y` and input `u`.
pub fn eso_derivative(state: &EsoState, y: &[f64], u: &[f64], cfg: &EsoConfig) -> Result<EsoState, EsoError> {
    let dims = cfg.dims;
    let (k, n) = (dims.k(), dims.n());
    if state.xhat.dim() != dims.state_dim()
        || state.xhat_ext.dim() != n
        || y.len() != n
        || u.len() != n
    {
        return Err(EsoError::Dimension(format!(
            "observer expects x̂: {}, ext/y/u: {n}",
            dims.state_dim()
        )));
    }
    if !state.xhat.is_finite()
        || !state.xhat_ext.is_finite()
        || y.iter().chain(u).any(|v| !v.is_finite())
    {
        return Err(EsoError::NonFinite);
    }

    let err: Vec<f64> = y.iter().zip(&state.xhat[..n]).map(|(a, b)| a - b).collect();
    let linear = cfg.linear_gains();
    let mut dx = vec![0.0; dims.state_dim()];
    for i in 0..k {
        let inj = cfg.injection(i + 1, &err, linear.as_deref());
        let next: &[f64] = if i + 1 < k {
            &state.xhat[(i + 1) * n..(i + 2) * n]
        } else {
            &state.xhat_ext
        };
        for r in 0..n {
            dx[i * n + r] = next[r] + inj[r];
        }
    }

    let g = match cfg.g_hat_argument {
        GHatArgument::Estimate => (cfg.g_hat)(&state.xhat),
        GHatArgument::Measurement => {
            let mut arg = state.xhat.to_vec();
            arg[..n].copy_from_slice(y);
            (cfg.g_hat)(&arg)
        }
    };
    let gu = g
        .mul_vec(u)
        .map_err(|e| EsoError::Dimension(format!("Ĝ has wrong shape: {e}")))?;
    for r in 0..n {
        dx[(k - 1) * n + r] += gu[r];
    }

    let dext = cfg.injection(k + 1, &err, linear.as_deref());
    let out = EsoState {
        xhat: dx.into(),
        xhat_ext: dext.into(),
    };
    if !out.xhat.is_finite() || !out.xhat_ext.is_finite() {
        return Err(EsoError::NonFinite);
    }
    Ok(out)
}
