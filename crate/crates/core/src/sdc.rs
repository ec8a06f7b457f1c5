//! State-dependent coefficient (SDC) factorization from observer outputs.
//!
//! The observer delivers `x̂ ∈ R^{kn}` and the extended state `x̂ₖ₊₁ ∈ Rⁿ`. A
//! matrix `F̂(x̂)` with `F̂(x̂)·x̂ = x̂ₖ₊₁` turns the estimated total dynamics into
//! the block-companion pair
//!
//! ```text
//! Â(x̂) = [ 0  I_{(k-1)n} ]      B̂(x̂) = [ 0 ]
//!        [      F̂(x̂)     ]             [ Ĝ ]
//! ```
//!
//! `F̂ = W ⊙ (x̂ₖ₊₁ ⊘ x̂)` where each row of `W` sums to one. Three weightings
//! are provided: a smooth exponential one for `n ≥ 2`, its scalar
//! second-order special case, and a switching one that stays finite when a
//! coordinate of `x̂` is exactly zero.

use thiserror::Error;

use crate::matops::{hadamard, oslash, rank, MatError, Matrix, Vector};

/// Coordinates smaller than this make the continuous variants singular.
pub const CONTINUOUS_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdcError {
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("estimate coordinate {index} is zero or below the singularity guard")]
    SingularState { index: usize },
    #[error("variant not applicable: {0}")]
    VariantMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("SDC matrix has non-finite entries")]
    NonFinite,
    #[error(transparent)]
    Mat(#[from] MatError),
}

/// System order `k` and channel dimension `n`; the state has `k·n` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SystemDims {
    k: usize,
    n: usize,
}

impl SystemDims {
    pub fn new(k: usize, n: usize) -> Result<Self, SdcError> {
        if k == 0 || n == 0 {
            return Err(SdcError::Dimension(format!("k and n must be >= 1, got k={k}, n={n}")));
        }
        Ok(Self { k, n })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn state_dim(&self) -> usize {
        self.k * self.n
    }
}

/// Observer output at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub xhat: Vector,
    pub xhat_ext: Vector,
    pub t: f64,
}

impl Estimate {
    pub fn new(dims: SystemDims, xhat: Vector, xhat_ext: Vector, t: f64) -> Result<Self, SdcError> {
        if xhat.dim() != dims.state_dim() || xhat_ext.dim() != dims.n() {
            return Err(SdcError::Dimension(format!(
                "estimate needs {} + {} entries, got {} + {}",
                dims.state_dim(),
                dims.n(),
                xhat.dim(),
                xhat_ext.dim()
            )));
        }
        Ok(Self { xhat, xhat_ext, t })
    }

    fn check(&self, dims: SystemDims) -> Result<(), SdcError> {
        if self.xhat.dim() != dims.state_dim() || self.xhat_ext.dim() != dims.n() {
            return Err(SdcError::Dimension(format!(
                "estimate shape ({}, {}) does not match k={}, n={}",
                self.xhat.dim(),
                self.xhat_ext.dim(),
                dims.k(),
                dims.n()
            )));
        }
        Ok(())
    }
}

/// Parameters of the smooth weighting for `n ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSdc {
    varpi: f64,
    varrho: Vec<f64>,
    /// 0-based `𝒥₁` for every row; `𝒥₂` is the complement.
    index_sets: Vec<Vec<usize>>,
}

impl ContinuousSdc {
    /// Uses `𝒥₁(i) = {i, i+n, …, i+(k−1)n}`, i.e. every derivative order of
    /// channel `i`.
    pub fn new(dims: SystemDims, varpi: f64, varrho: Vec<f64>) -> Result<Self, SdcError> {
        let sets = (0..dims.n())
            .map(|i| (0..dims.k()).map(|m| i + m * dims.n()).collect())
            .collect();
        Self::with_index_sets(dims, varpi, varrho, sets)
    }

    /// Custom `𝒥₁` per row. Each set must be a nonempty proper subset of
    /// `{0, …, kn−1}` so that it and its complement partition the columns.
    pub fn with_index_sets(
        dims: SystemDims,
        varpi: f64,
        varrho: Vec<f64>,
        index_sets: Vec<Vec<usize>>,
    ) -> Result<Self, SdcError> {
        if dims.n() < 2 {
            return Err(SdcError::VariantMismatch(
                "continuous SDC requires n >= 2".into(),
            ));
        }
        if !(varpi > 0.0 && varpi.is_finite()) {
            return Err(SdcError::InvalidParameter(format!("varpi must be > 0, got {varpi}")));
        }
        if varrho.len() != dims.n() || varrho.iter().any(|r| *r == 0.0 || !r.is_finite()) {
            return Err(SdcError::InvalidParameter(format!(
                "varrho needs {} finite nonzero entries",
                dims.n()
            )));
        }
        if index_sets.len() != dims.n() {
            return Err(SdcError::InvalidParameter(format!(
                "need one index set per row ({}), got {}",
                dims.n(),
                index_sets.len()
            )));
        }
        let total = dims.state_dim();
        for (i, set) in index_sets.iter().enumerate() {
            let mut seen = vec![false; total];
            for &j in set {
                if j >= total || seen[j] {
                    return Err(SdcError::InvalidParameter(format!(
                        "index set of row {i} has an out-of-range or repeated column {j}"
                    )));
                }
                seen[j] = true;
            }
            if set.is_empty() || set.len() == total {
                return Err(SdcError::InvalidParameter(format!(
                    "index set of row {i} must be a nonempty proper subset"
                )));
            }
        }
        Ok(Self {
            varpi,
            varrho,
            index_sets,
        })
    }

    pub fn varpi(&self) -> f64 {
        self.varpi
    }

    pub fn varrho(&self) -> &[f64] {
        &self.varrho
    }

    /// `(𝒥₁, 𝒥₂)` of row `i`, both sorted.
    pub fn partition(&self, i: usize, total: usize) -> (Vec<usize>, Vec<usize>) {
        let mut j1 = self.index_sets[i].clone();
        j1.sort_unstable();
        let j2 = (0..total).filter(|j| !j1.contains(j)).collect();
        (j1, j2)
    }

    fn dims_ok(&self, dims: SystemDims) -> Result<(), SdcError> {
        let total = dims.state_dim();
        if self.varrho.len() != dims.n()
            || self.index_sets.iter().flatten().any(|&j| j >= total)
        {
            return Err(SdcError::VariantMismatch(
                "continuous SDC parameters built for different dimensions".into(),
            ));
        }
        Ok(())
    }
}

/// Off-argmin column weights of the switching variant.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightRule {
    /// All off-argmin columns weighted equally.
    Uniform,
    /// Positive relative weights per row (`n` rows of `kn` entries).
    Relative(Vec<Vec<f64>>),
}

/// Parameters of the switching weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscontinuousSdc {
    rho: Vec<f64>,
    weights: WeightRule,
}

impl DiscontinuousSdc {
    pub fn new(dims: SystemDims, rho: Vec<f64>, weights: WeightRule) -> Result<Self, SdcError> {
        if dims.state_dim() < 2 {
            return Err(SdcError::VariantMismatch(
                "discontinuous SDC requires k*n >= 2".into(),
            ));
        }
        if rho.len() != dims.n() || rho.iter().any(|r| *r == 0.0 || !r.is_finite()) {
            return Err(SdcError::InvalidParameter(format!(
                "rho needs {} finite nonzero entries",
                dims.n()
            )));
        }
        if let WeightRule::Relative(rows) = &weights {
            let ok = rows.len() == dims.n()
                && rows
                    .iter()
                    .all(|r| r.len() == dims.state_dim() && r.iter().all(|w| *w > 0.0 && w.is_finite()));
            if !ok {
                return Err(SdcError::InvalidParameter(format!(
                    "relative weights must be {}x{} positive finite values",
                    dims.n(),
                    dims.state_dim()
                )));
            }
        }
        Ok(Self { rho, weights })
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Effective `w_i(j)` for every `j ≠ j*`, scaled so that
    /// `Σ_{j≠j*} 1/w_i(j) = 1`, which makes the rows of `W` sum to one.
    /// The entry at `j*` is unused and set to `NaN`.
    pub fn effective_weights(&self, row: usize, total: usize, j_star: usize) -> Vec<f64> {
        let raw: Vec<f64> = match &self.weights {
            WeightRule::Uniform => vec![1.0; total],
            WeightRule::Relative(rows) => rows[row].clone(),
        };
        let inv_sum: f64 = (0..total).filter(|&j| j != j_star).map(|j| 1.0 / raw[j]).sum();
        (0..total)
            .map(|j| if j == j_star { f64::NAN } else { raw[j] * inv_sum })
            .collect()
    }
}

/// Choice of SDC construction.
#[derive(Debug, Clone, PartialEq)]
pub enum SdcVariant {
    Continuous(ContinuousSdc),
    /// `F̂ = x̂₃·[e^{−x̂₂/x̂₁}/x̂₁, (1 − e^{−x̂₂/x̂₁})/x̂₂]`, only for `k = 2, n = 1`.
    ContinuousScalar2ndOrder,
    Discontinuous(DiscontinuousSdc),
}

impl SdcVariant {
    /// Unit parameters for the given dimensions.
    pub fn default_continuous(dims: SystemDims) -> Result<Self, SdcError> {
        Ok(Self::Continuous(ContinuousSdc::new(dims, 1.0, vec![1.0; dims.n()])?))
    }

    pub fn default_discontinuous(dims: SystemDims) -> Result<Self, SdcError> {
        Ok(Self::Discontinuous(DiscontinuousSdc::new(
            dims,
            vec![1.0; dims.n()],
            WeightRule::Uniform,
        )?))
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, Self::Discontinuous(_))
    }

    /// Evaluates `F̂(x̂)`.
    pub fn f_hat(&self, est: &Estimate, dims: SystemDims) -> Result<SdcEval, SdcError> {
        match self {
            Self::Continuous(c) => Ok(SdcEval {
                f_hat: build_f_continuous(est, dims, c)?,
                tie: false,
            }),
            Self::ContinuousScalar2ndOrder => {
                if dims != SystemDims::new(2, 1)? {
                    return Err(SdcError::VariantMismatch(
                        "scalar second-order SDC requires k=2, n=1".into(),
                    ));
                }
                Ok(SdcEval {
                    f_hat: build_f_continuous_scalar(est)?,
                    tie: false,
                })
            }
            Self::Discontinuous(d) => {
                let out = build_f_discontinuous(est, dims, d)?;
                Ok(SdcEval {
                    f_hat: out.f_hat,
                    tie: out.tie,
                })
            }
        }
    }
}

/// `F̂` together with whether an argmin tie was broken while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcEval {
    pub f_hat: Matrix,
    pub tie: bool,
}

/// `(Â, B̂)` with the blocks they were assembled from.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcFactorization {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
    pub f_hat: Matrix,
    pub g_hat: Matrix,
}

fn check_continuous_state(xhat: &[f64]) -> Result<(), SdcError> {
    match xhat.iter().position(|v| !(v.abs() >= CONTINUOUS_GUARD)) {
        Some(index) => Err(SdcError::SingularState { index }),
        None => Ok(()),
    }
}

/// Weight matrix `W` of the smooth variant.
///
/// `W(i,j) = ϱᵢpᵢ/|𝒥₁|` on `𝒥₁` and `(1 − ϱᵢpᵢ)/|𝒥₂|` on `𝒥₂`, with
/// `pᵢ = exp(−ϖ·Π_{j∉𝒥₁}|x̂_j| / Π_{j∈𝒥₁}|x̂_j|)`.
pub fn build_w_continuous(
    est: &Estimate,
    dims: SystemDims,
    variant: &ContinuousSdc,
) -> Result<Matrix, SdcError> {
    if dims.n() < 2 {
        return Err(SdcError::VariantMismatch("continuous SDC requires n >= 2".into()));
    }
    est.check(dims)?;
    variant.dims_ok(dims)?;
    check_continuous_state(&est.xhat)?;
    let total = dims.state_dim();
    let mut w = Matrix::zeros(dims.n(), total);
    for i in 0..dims.n() {
        let (j1, j2) = variant.partition(i, total);
        // ratio of products, accumulated in log space against under/overflow
        let log_ratio: f64 = j2.iter().map(|&j| est.xhat[j].abs().ln()).sum::<f64>()
            - j1.iter().map(|&j| est.xhat[j].abs().ln()).sum::<f64>();
        let exponent = -variant.varpi * log_ratio.exp();
        let p = exponent.exp();
        let rho = variant.varrho[i];
        // 1 − ϱp = (1 − ϱ) − ϱ·expm1(exponent), exact near p → 1
        let one_minus = (1.0 - rho) - rho * exponent.exp_m1();
        for &j in &j1 {
            w[(i, j)] = rho * p / j1.len() as f64;
        }
        for &j in &j2 {
            w[(i, j)] = one_minus / j2.len() as f64;
        }
    }
    Ok(w)
}

/// `F̂ = W ⊙ (x̂ₖ₊₁ ⊘ x̂)` for the smooth variant.
pub fn build_f_continuous(
    est: &Estimate,
    dims: SystemDims,
    variant: &ContinuousSdc,
) -> Result<Matrix, SdcError> {
    let w = build_w_continuous(est, dims, variant)?;
    let ratio = oslash(&est.xhat_ext, &est.xhat)?;
    let f = hadamard(&w, &ratio)?;
    if !f.is_finite() {
        return Err(SdcError::NonFinite);
    }
    Ok(f)
}

/// Scalar second-order special case (`k = 2`, `n = 1`).
pub fn build_f_continuous_scalar(est: &Estimate) -> Result<Matrix, SdcError> {
    est.check(SystemDims::new(2, 1)?)?;
    check_continuous_state(&est.xhat)?;
    let (x1, x2, x3) = (est.xhat[0], est.xhat[1], est.xhat_ext[0]);
    let r = x2 / x1;
    let e = (-r).exp();
    let one_minus = -(-r).exp_m1();
    let f = [x3 * e / x1, x3 * one_minus / x2];
    if f.iter().any(|v| !v.is_finite()) {
        return Err(SdcError::NonFinite);
    }
    Ok(Matrix::row(&f))
}

/// Output of the switching construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscontinuousF {
    pub f_hat: Matrix,
    /// 0-based index of the smallest-magnitude coordinate.
    pub j_star: usize,
    /// The argmin was not unique; the lowest index was taken.
    pub tie: bool,
}

/// Index of the smallest `|x̂_l|`, lowest index on ties.
pub fn argmin_abs(xhat: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (l, v) in xhat.iter().enumerate().skip(1) {
        if v.abs() < xhat[best].abs() {
            best = l;
        }
    }
    let tie = xhat
        .iter()
        .enumerate()
        .any(|(l, v)| l != best && v.abs() == xhat[best].abs());
    (best, tie)
}

/// Switching SDC matrix.
///
/// `W(i,j*) = ρᵢx̂_{j*}` and `W(i,j) = (1 − ρᵢx̂_{j*})/wᵢ(j)` elsewhere. The
/// `j*` column of `F̂` is `ρᵢ·x̂ₖ₊₁(i)` since `x̂_{j*}` cancels, which keeps `F̂`
/// finite when `x̂_{j*} = 0`. Off-argmin columns that are also exactly zero
/// (only possible on a tie at zero) are set to zero.
pub fn build_f_discontinuous(
    est: &Estimate,
    dims: SystemDims,
    variant: &DiscontinuousSdc,
) -> Result<DiscontinuousF, SdcError> {
    est.check(dims)?;
    if variant.rho.len() != dims.n() || dims.state_dim() < 2 {
        return Err(SdcError::VariantMismatch(
            "discontinuous SDC parameters built for different dimensions".into(),
        ));
    }
    let total = dims.state_dim();
    let (j_star, tie) = argmin_abs(&est.xhat);
    let x_star = est.xhat[j_star];
    let mut f = Matrix::zeros(dims.n(), total);
    for i in 0..dims.n() {
        let rho = variant.rho[i];
        let ext = est.xhat_ext[i];
        let w = variant.effective_weights(i, total, j_star);
        f[(i, j_star)] = rho * ext;
        for j in (0..total).filter(|&j| j != j_star) {
            let xj = est.xhat[j];
            f[(i, j)] = if xj == 0.0 {
                0.0
            } else {
                (1.0 - rho * x_star) / w[j] * ext / xj
            };
        }
    }
    if !f.is_finite() {
        return Err(SdcError::NonFinite);
    }
    Ok(DiscontinuousF { f_hat: f, j_star, tie })
}

/// Assembles `Â = [[0, I]; F̂]` and `B̂ = [0; Ĝ]`.
///
/// A singular `Ĝ` is accepted here; [`controllability_check`] reports it.
pub fn assemble(f_hat: &Matrix, g_hat: &Matrix, dims: SystemDims) -> Result<SdcFactorization, SdcError> {
    let (n, total) = (dims.n(), dims.state_dim());
    if f_hat.shape() != (n, total) {
        return Err(SdcError::Dimension(format!(
            "F̂ must be {n}x{total}, got {:?}",
            f_hat.shape()
        )));
    }
    if g_hat.shape() != (n, n) {
        return Err(SdcError::Dimension(format!("Ĝ must be {n}x{n}, got {:?}", g_hat.shape())));
    }
    let shift = total - n;
    let mut a_hat = Matrix::zeros(total, total);
    for i in 0..shift {
        a_hat[(i, i + n)] = 1.0;
    }
    a_hat.set_block(shift, 0, f_hat);
    let mut b_hat = Matrix::zeros(total, n);
    b_hat.set_block(shift, 0, g_hat);
    Ok(SdcFactorization {
        a_hat,
        b_hat,
        f_hat: f_hat.clone(),
        g_hat: g_hat.clone(),
    })
}

/// Chain of integrators `(A₀, B₀)`: `F̂ = 0`, `Ĝ = I`.
pub fn chain_integrator(dims: SystemDims) -> SdcFactorization {
    assemble(
        &Matrix::zeros(dims.n(), dims.state_dim()),
        &Matrix::identity(dims.n()),
        dims,
    )
    .expect("shapes are consistent by construction")
}

/// Kalman controllability matrix `[B̂, ÂB̂, …, Â^{kn−1}B̂]`.
pub fn controllability_matrix(fact: &SdcFactorization) -> Matrix {
    let total = fact.a_hat.rows();
    let mut blocks = fact.b_hat.clone();
    let mut term = fact.b_hat.clone();
    for _ in 1..total {
        term = fact.a_hat.matmul(&term).expect("square Â");
        blocks = blocks.hcat(&term).expect("same row count");
    }
    blocks
}

/// `rank(C) = kn` for the Kalman matrix of `(Â, B̂)`.
pub fn controllability_check(fact: &SdcFactorization, tol: f64) -> bool {
    rank(&controllability_matrix(fact), tol) == fact.a_hat.rows()
}
