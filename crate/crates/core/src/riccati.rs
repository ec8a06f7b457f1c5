//! Continuous algebraic Riccati and Lyapunov equations.
//!
//! The CARE `AᵀP + PA − PBR⁻¹BᵀP + Q = 0` is solved by Kleinman–Newton
//! iteration, which needs nothing beyond dense linear solves: each step solves
//! one Lyapunov equation for the current closed loop. Lyapunov equations are
//! solved by vectorization through the Kronecker sum, and stability /
//! definiteness are certified with a Cholesky factorization instead of an
//! eigensolver.

use thiserror::Error;

use crate::matops::{kronecker, solve_linear, MatError, Matrix};
use crate::sdc::SystemDims;

/// Absolute Frobenius bound on the CARE residual for well-scaled problems.
pub const CARE_RESIDUAL_TOL: f64 = 1e-8;
/// Relative step size at which the Kleinman iteration is considered converged.
pub const KLEINMAN_STEP_TOL: f64 = 1e-11;
pub const KLEINMAN_MAX_ITER: usize = 100;
/// Minimum Cholesky pivot when certifying a Hurwitz matrix.
pub const HURWITZ_PIVOT_TOL: f64 = 1e-12;
/// Relative minimum Cholesky pivot for positive definiteness.
pub const PD_PIVOT_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiccatiError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("no stabilizing initial gain could be found")]
    NotStabilizable,
    #[error("Kleinman iteration failed after {iterations} iterations: {reason}")]
    Convergence { iterations: usize, reason: String },
    #[error("singular linear system: {0}")]
    Singular(MatError),
    #[error(transparent)]
    Mat(#[from] MatError),
}

/// Data of one CARE instance. Construct through [`CareProblem::new`], which
/// checks shapes and definiteness of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CareProblem {
    a: Matrix,
    b: Matrix,
    q: Matrix,
    r: Matrix,
}

impl CareProblem {
    pub fn new(a: Matrix, b: Matrix, q: Matrix, r: Matrix) -> Result<Self, RiccatiError> {
        let n = a.rows();
        if !a.is_square() {
            return Err(RiccatiError::InvalidProblem(format!(
                "A must be square, got {:?}",
                a.shape()
            )));
        }
        if b.rows() != n || b.cols() == 0 {
            return Err(RiccatiError::InvalidProblem(format!(
                "B must have {n} rows, got {:?}",
                b.shape()
            )));
        }
        let m = b.cols();
        if q.shape() != (n, n) {
            return Err(RiccatiError::InvalidProblem(format!(
                "Q must be {n}x{n}, got {:?}",
                q.shape()
            )));
        }
        if r.shape() != (m, m) {
            return Err(RiccatiError::InvalidProblem(format!(
                "R must be {m}x{m}, got {:?}",
                r.shape()
            )));
        }
        for (name, w) in [("Q", &q), ("R", &r)] {
            if !is_symmetric(w, SYMMETRY_TOL) {
                return Err(RiccatiError::InvalidProblem(format!("{name} is not symmetric")));
            }
            if !is_positive_definite(w) {
                return Err(RiccatiError::InvalidProblem(format!(
                    "{name} is not positive definite"
                )));
            }
        }
        Ok(Self { a, b, q, r })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    /// Frobenius norm of `AᵀP + PA − PBR⁻¹BᵀP + Q`.
    pub fn residual(&self, p: &Matrix) -> Result<f64, RiccatiError> {
        let s = self.input_weight()?;
        Ok(self.residual_matrix(p, &s)?.norm_fro())
    }

    /// `B R⁻¹ Bᵀ`.
    fn input_weight(&self) -> Result<Matrix, RiccatiError> {
        let r_inv = self.r.inverse().map_err(RiccatiError::Singular)?;
        Ok(self.b.matmul(&r_inv)?.matmul(&self.b.transpose())?)
    }

    fn residual_matrix(&self, p: &Matrix, s: &Matrix) -> Result<Matrix, MatError> {
        let at_p = self.a.transpose().matmul(p)?;
        let psp = p.matmul(s)?.matmul(p)?;
        at_p.add(&at_p.transpose())?.sub(&psp)?.add(&self.q)
    }
}

/// Stabilizing CARE solution with its optimal gain.
#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: Matrix,
    /// `K = R⁻¹BᵀP`.
    pub k: Matrix,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Frobenius norms `‖P_{j+1} − P_j‖` in iteration order.
    pub step_norms: Vec<f64>,
    /// Every iterate after the first lies below its predecessor in the
    /// Loewner order, up to roundoff.
    pub loewner_decreasing: bool,
}

/// Solves the CARE by Kleinman–Newton iteration.
///
/// `k0` must make `A − B·k0` Hurwitz. Without it the initial gain is taken as
/// zero when `A` is already Hurwitz, from [`bootstrap_stabilizing_gain`] when
/// `(A, B)` has block-companion structure, and from Bass's shifted Lyapunov
/// construction otherwise.
pub fn solve_care(prob: &CareProblem, k0: Option<&Matrix>) -> Result<CareSolution, RiccatiError> {
    let (a, b, q, r) = (&prob.a, &prob.b, &prob.q, &prob.r);
    let r_inv = r.inverse().map_err(RiccatiError::Singular)?;
    let r_inv_bt = r_inv.matmul(&b.transpose())?;
    let s = b.matmul(&r_inv_bt)?;

    let mut k = match k0 {
        Some(k0) => {
            if k0.shape() != (b.cols(), a.rows()) {
                return Err(RiccatiError::InvalidProblem(format!(
                    "initial gain must be {}x{}, got {:?}",
                    b.cols(),
                    a.rows(),
                    k0.shape()
                )));
            }
            k0.clone()
        }
        None => initial_gain(a, b)?,
    };

    let mut p_prev: Option<Matrix> = None;
    let mut step_norms: Vec<f64> = Vec::new();
    let mut loewner_decreasing = true;
    let mut iterations = 0;
    while iterations < KLEINMAN_MAX_ITER {
        iterations += 1;
        let a_cl = a.sub(&b.matmul(&k)?)?;
        let q_k = q.add(&k.transpose().matmul(r)?.matmul(&k)?)?;
        let p = solve_lyapunov(&a_cl, &q_k).map_err(|e| RiccatiError::Convergence {
            iterations,
            reason: format!("closed loop lost stability ({e})"),
        })?;
        if !is_positive_definite(&p) {
            return Err(RiccatiError::Convergence {
                iterations,
                reason: "intermediate solution is not positive definite".into(),
            });
        }
        let k_next = r_inv_bt.matmul(&p)?;
        if let Some(prev) = p_prev.as_ref() {
            let step = p.sub(prev)?.norm_fro();
            let scale = prev.norm_fro();
            // below 1e-8 relative only roundoff is left; an increase there
            // means the previous iterate is as good as it gets
            if step_norms.last().is_some_and(|&last| step >= last) && step <= 1e-8 * scale {
                break;
            }
            step_norms.push(step);
            if !dominates(prev, &p) {
                loewner_decreasing = false;
            }
            if step <= KLEINMAN_STEP_TOL * scale {
                p_prev = Some(p);
                k = k_next;
                break;
            }
        }
        p_prev = Some(p);
        k = k_next;
    }

    let p = p_prev.expect("at least one iteration runs");
    let residual = prob.residual_matrix(&p, &s)?;
    let residual_norm = residual.norm_fro();
    let scale = 1.0 + q.norm_fro() + p.matmul(&s)?.matmul(&p)?.norm_fro();
    if !(residual_norm <= CARE_RESIDUAL_TOL * scale) {
        return Err(RiccatiError::Convergence {
            iterations,
            reason: format!("final residual {residual_norm:e} too large"),
        });
    }
    Ok(CareSolution {
        p,
        k,
        residual_norm,
        iterations,
        step_norms,
        loewner_decreasing,
    })
}

/// `upper − lower ⪰ 0` up to `1e-9·‖upper‖∞` of slack.
fn dominates(upper: &Matrix, lower: &Matrix) -> bool {
    let Ok(diff) = upper.sub(lower) else {
        return false;
    };
    let n = diff.rows();
    let slack = 1e-9 * upper.norm_inf().max(1.0);
    let shifted = diff.add(&Matrix::identity(n).scale(slack)).expect("square");
    cholesky_min_pivot(&shifted, 0.0).is_some()
}

fn initial_gain(a: &Matrix, b: &Matrix) -> Result<Matrix, RiccatiError> {
    if is_hurwitz(a) {
        return Ok(Matrix::zeros(b.cols(), a.rows()));
    }
    if let Some((dims, f_hat, g_hat)) = companion_parts(a, b) {
        if let Ok(k) = bootstrap_stabilizing_gain(a, b, dims, &f_hat, &g_hat) {
            return Ok(k);
        }
    }
    bass_gain(a, b)
}

/// Splits `(A, B)` into `(dims, F, G)` when it has the block-companion form
/// `A = [[0, I]; F]`, `B = [0; G]`.
fn companion_parts(a: &Matrix, b: &Matrix) -> Option<(SystemDims, Matrix, Matrix)> {
    let n = b.cols();
    let total = a.rows();
    if n == 0 || !total.is_multiple_of(n) {
        return None;
    }
    let dims = SystemDims::new(total / n, n).ok()?;
    let shift_rows = total - n;
    for i in 0..shift_rows {
        for j in 0..total {
            let expect = if j == i + n { 1.0 } else { 0.0 };
            if a[(i, j)] != expect {
                return None;
            }
        }
        if b.row_slice(i).iter().any(|v| *v != 0.0) {
            return None;
        }
    }
    Some((
        dims,
        a.block(shift_rows, 0, n, total),
        b.block(shift_rows, 0, n, n),
    ))
}

/// Bass's construction: with `β > max Re λ(A)` solve
/// `(A+βI)Z + Z(A+βI)ᵀ = 2BBᵀ`; then `K = BᵀZ⁻¹` stabilizes any controllable
/// pair.
fn bass_gain(a: &Matrix, b: &Matrix) -> Result<Matrix, RiccatiError> {
    let n = a.rows();
    let beta = a.norm_inf() + 1.0;
    let shifted = a.add(&Matrix::identity(n).scale(beta))?;
    let bbt2 = b.matmul(&b.transpose())?.scale(2.0);
    let z = solve_lyapunov(&shifted.transpose().scale(-1.0), &bbt2)
        .map_err(|_| RiccatiError::NotStabilizable)?;
    if !is_positive_definite(&z) {
        return Err(RiccatiError::NotStabilizable);
    }
    let z_inv = z.inverse().map_err(|_| RiccatiError::NotStabilizable)?;
    let k = b.transpose().matmul(&z_inv)?;
    if is_hurwitz(&a.sub(&b.matmul(&k)?)?) {
        Ok(k)
    } else {
        Err(RiccatiError::NotStabilizable)
    }
}

/// Binomial coefficients of `(s + 1)^k`, lowest order first, without the
/// leading `s^k` term.
fn unit_pole_coefficients(k: usize) -> Vec<f64> {
    let mut c = vec![1.0; k + 1];
    for j in 1..k {
        c[j] = c[j - 1] * (k - j + 1) as f64 / j as f64;
    }
    c.truncate(k);
    c
}

/// Stabilizing gain for a block-companion pair by feedback linearization.
///
/// Returns `K₀ = Ĝ⁻¹(F̂ + Λ)` where `Λ` places every channel of the resulting
/// chain of integrators at `(s + 1)^k`, and checks that `A − B·K₀` is Hurwitz.
pub fn bootstrap_stabilizing_gain(
    a: &Matrix,
    b: &Matrix,
    dims: SystemDims,
    f_hat: &Matrix,
    g_hat: &Matrix,
) -> Result<Matrix, RiccatiError> {
    let (n, total) = (dims.n(), dims.state_dim());
    if f_hat.shape() != (n, total) || g_hat.shape() != (n, n) {
        return Err(RiccatiError::InvalidProblem(format!(
            "F̂ must be {n}x{total} and Ĝ {n}x{n}, got {:?} and {:?}",
            f_hat.shape(),
            g_hat.shape()
        )));
    }
    if a.shape() != (total, total) || b.shape() != (total, n) {
        return Err(RiccatiError::InvalidProblem(format!(
            "A must be {total}x{total} and B {total}x{n}"
        )));
    }
    let coeffs = unit_pole_coefficients(dims.k());
    let mut lambda = Matrix::zeros(n, total);
    for (j, c) in coeffs.iter().enumerate() {
        for r in 0..n {
            lambda[(r, j * n + r)] = *c;
        }
    }
    let g_inv = g_hat.inverse().map_err(RiccatiError::Singular)?;
    let k0 = g_inv.matmul(&f_hat.add(&lambda)?)?;
    if is_hurwitz(&a.sub(&b.matmul(&k0)?)?) {
        Ok(k0)
    } else {
        Err(RiccatiError::NotStabilizable)
    }
}

/// Solves `AᵀP + PA + Q = 0` through `(I⊗Aᵀ + Aᵀ⊗I) vec(P) = −vec(Q)`.
///
/// The result is symmetrized. A singular Kronecker sum (two eigenvalues of
/// `A` summing to zero) is reported as [`RiccatiError::Singular`].
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, RiccatiError> {
    if !a.is_square() || q.shape() != a.shape() {
        return Err(RiccatiError::InvalidProblem(format!(
            "Lyapunov equation needs square A and matching Q, got {:?} and {:?}",
            a.shape(),
            q.shape()
        )));
    }
    let n = a.rows();
    let at = a.transpose();
    let eye = Matrix::identity(n);
    let op = kronecker(&eye, &at).add(&kronecker(&at, &eye))?;
    let rhs: Vec<f64> = q.vec_columns().iter().map(|v| -v).collect();
    let x = solve_linear(&op, &rhs).map_err(RiccatiError::Singular)?;
    Ok(Matrix::from_columns_vec(n, n, &x).symmetrized())
}

/// Smallest Cholesky pivot of `(P + Pᵀ)/2`, or `None` when the
/// factorization breaks down (a pivot `≤ threshold`).
fn cholesky_min_pivot(p: &Matrix, threshold: f64) -> Option<f64> {
    let n = p.rows();
    let s = p.symmetrized();
    let mut l = Matrix::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let d = s[(j, j)] - (0..j).map(|c| l[(j, c)] * l[(j, c)]).sum::<f64>();
        if !(d > threshold) {
            return None;
        }
        min_pivot = min_pivot.min(d);
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let v = s[(i, j)] - (0..j).map(|c| l[(i, c)] * l[(j, c)]).sum::<f64>();
            l[(i, j)] = v / ljj;
        }
    }
    Some(min_pivot)
}

/// `true` iff the symmetric part of `P` admits a Cholesky factorization with
/// every pivot above `1e-12·‖P‖∞`.
pub fn is_positive_definite(p: &Matrix) -> bool {
    if !p.is_square() || p.rows() == 0 || !p.is_finite() {
        return false;
    }
    let norm = p.norm_inf();
    norm > 0.0 && cholesky_min_pivot(p, PD_PIVOT_TOL * norm).is_some()
}

/// `true` iff `AᵀP + PA + I = 0` has a positive definite solution, which
/// holds exactly when every eigenvalue of `A` has negative real part.
pub fn is_hurwitz(a: &Matrix) -> bool {
    if !a.is_square() || !a.is_finite() {
        return false;
    }
    match solve_lyapunov(a, &Matrix::identity(a.rows())) {
        Ok(p) => cholesky_min_pivot(&p, HURWITZ_PIVOT_TOL).is_some(),
        Err(_) => false,
    }
}

pub fn is_symmetric(m: &Matrix, rel_tol: f64) -> bool {
    m.is_square() && m.sub(&m.transpose()).is_ok_and(|d| d.max_abs() <= rel_tol * m.max_abs().max(1.0))
}
