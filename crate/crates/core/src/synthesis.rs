//! Terminal ingredients for the quasi-infinite-horizon construction: local
//! LQR gain `K`, decay offset `κ`, Lyapunov weight `P`, composite weight
//! `Q* = Q + KᵀRK` and the terminal level `ε`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, eigenvalues, frobenius, is_hurwitz, quad_form};
use crate::model::SystemModel;

/// Largest state dimension handled by the Kronecker Lyapunov solver.
pub const MAX_LYAPUNOV_DIM: usize = 20;

const NEWTON_MAX_ITER: usize = 60;

#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub k: DMatrix<f64>,
    pub kappa: f64,
    pub p: DMatrix<f64>,
    pub qstar: DMatrix<f64>,
    pub epsilon: f64,
}

/// Result of the level search, with both candidate bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalLevel {
    pub epsilon: f64,
    /// Largest level keeping `Kx` inside the input box.
    pub epsilon_input: f64,
    /// Largest verified level of the decrease condition (≤ `epsilon_input`).
    pub epsilon_decrease: f64,
}

/// CARE solution and the gain it induces.
#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub k: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// `‖AᵀS + SA − SBR⁻¹BᵀS + Q‖_F`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> f64 {
    let r_inv = r.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(r.nrows(), r.ncols()));
    let res = a.transpose() * s + s * a - s * b * r_inv * b.transpose() * s + q;
    frobenius(&res)
}

/// `‖AkᵀP + P·Ak + Q*‖_F`.
pub fn lyapunov_residual(ak: &DMatrix<f64>, qstar: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    frobenius(&(ak.transpose() * p + p * ak + qstar))
}

/// Solves `AkᵀP + P·Ak = −Q*` through the vectorized system
/// `(I ⊗ Akᵀ + Akᵀ ⊗ I) vec(P) = −vec(Q*)`.
pub fn solve_lyapunov(ak: &DMatrix<f64>, qstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = ak.nrows();
    if !ak.is_square() || qstar.nrows() != n || qstar.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "Lyapunov operands",
            expected: n,
            found: qstar.nrows(),
        });
    }
    if n > MAX_LYAPUNOV_DIM {
        return Err(Error::Synthesis(format!(
            "Kronecker Lyapunov solver supports n ≤ {MAX_LYAPUNOV_DIM}, got {n}"
        )));
    }
    if !is_hurwitz(ak) {
        return Err(Error::Synthesis(format!(
            "Lyapunov equation not uniquely solvable: matrix is not Hurwitz (eigenvalues {:?})",
            eigenvalues(ak)
        )));
    }
    let at = ak.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    // Column-major vec.
    let rhs = DVector::from_iterator(n * n, qstar.iter().map(|v| -v));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Synthesis("singular Kronecker Lyapunov operator".into()))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(linalg::symmetrize(&p))
}

/// Initial stabilizing gain by eigenvalue shifting (Bass): with
/// `σ > max Re λ(A)`, `K₀ = −BᵀZ⁻¹` where `(A+σI)Z + Z(A+σI)ᵀ = 2BBᵀ`.
fn initial_stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (a.nrows(), b.ncols());
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(m, n));
    }
    let max_re = eigenvalues(a).iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let sigma = max_re.max(0.0) + 1.0 + a.amax();
    // −(A+σI) is Hurwitz, so solve (−(A+σI))ᵀ… in the transposed form used by solve_lyapunov:
    // (A+σI)Z + Z(A+σI)ᵀ = 2BBᵀ  ⇔  (−(A+σI)ᵀ)ᵀ Z + Z (−(A+σI)ᵀ) = −2BBᵀ.
    let shifted = -(a + DMatrix::identity(n, n) * sigma).transpose();
    let z = solve_lyapunov(&shifted, &(b * b.transpose() * 2.0))?;
    let z_inv = z.clone().try_inverse().ok_or_else(|| unstabilizable(a, b))?;
    let k0 = -b.transpose() * z_inv;
    if is_hurwitz(&(a + b * &k0)) {
        Ok(k0)
    } else {
        Err(unstabilizable(a, b))
    }
}

fn unstabilizable(a: &DMatrix<f64>, _b: &DMatrix<f64>) -> Error {
    let bad: Vec<String> = eigenvalues(a)
        .iter()
        .filter(|l| l.re >= 0.0)
        .map(|l| format!("{:.6}{:+.6}i", l.re, l.im))
        .collect();
    Error::Synthesis(format!(
        "(A, B) is not stabilizable; offending eigenvalues: [{}]",
        bad.join(", ")
    ))
}

/// LQR gain for `ẋ = Ax + Bu` with the sign convention `u = Kx`, i.e.
/// `K = −R⁻¹BᵀS` where `S` solves the CARE. Newton–Kleinman iteration from
/// a shift-stabilizing initial gain.
pub fn lqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::DimensionMismatch {
            context: "LQR operands",
            expected: n,
            found: b.nrows(),
        });
    }
    if linalg::min_eigenvalue(r) <= 0.0 {
        return Err(Error::Synthesis("R must be positive definite".into()));
    }
    if linalg::min_eigenvalue(q) < -1e-12 {
        return Err(Error::Synthesis("Q must be positive semidefinite".into()));
    }
    let r_inv = r.clone().try_inverse().expect("R ≻ 0 is invertible");
    let tol = 1e-9 * frobenius(q).max(f64::MIN_POSITIVE);
    let mut k = initial_stabilizing_gain(a, b)?;
    let mut residual = f64::INFINITY;
    for it in 1..=NEWTON_MAX_ITER {
        let acl = a + b * &k;
        let rhs = q + k.transpose() * r * &k;
        let s = solve_lyapunov(&acl, &rhs)?;
        k = -&r_inv * b.transpose() * &s;
        residual = care_residual(a, b, q, r, &s);
        if residual <= tol {
            return Ok(LqrSolution { k, s, residual, iterations: it });
        }
    }
    Err(Error::Synthesis(format!(
        "Newton–Kleinman iteration did not converge (CARE residual {residual:e})"
    )))
}

/// Convenience wrapper returning only the gain.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    lqr(a, b, q, r).map(|s| s.k)
}

/// Half of the slowest closed-loop decay rate of `A + BK`.
pub fn choose_kappa(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<f64> {
    kappa_from_eigenvalues(&eigenvalues(&(a + b * k)).iter().map(|l| (l.re, l.im)).collect::<Vec<_>>())
}

/// Same rule on an explicit spectrum given as `(re, im)` pairs.
pub fn kappa_from_eigenvalues(eigs: &[(f64, f64)]) -> Result<f64> {
    if eigs.iter().any(|(re, _)| *re >= 0.0) {
        return Err(Error::Synthesis(format!(
            "closed loop A + BK is not Hurwitz (eigenvalues {eigs:?})"
        )));
    }
    let slowest = eigs.iter().map(|(re, _)| re.abs()).fold(f64::INFINITY, f64::min);
    Ok(0.5 * slowest)
}

/// Lyapunov decrease margin at `x` under `u = Kx`:
/// `−(2xᵀP f(x,Kx) + ‖x‖²_{Q*})`; non-negative when the condition holds.
pub fn decrease_margin(
    model: &SystemModel,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    qstar: &DMatrix<f64>,
    x: &DVector<f64>,
) -> f64 {
    let u = k * x;
    let mut f = DVector::zeros(model.state_dim());
    model.eval_into(x.as_slice(), u.as_slice(), f.as_mut_slice());
    let vdot = 2.0 * (x.transpose() * p * &f)[(0, 0)];
    -(vdot + quad_form(x, qstar))
}

const BOUNDARY_SAMPLES: usize = 512;
const INTERIOR_SAMPLES: usize = 64;
const LEVEL_BISECTIONS: usize = 16;

fn decrease_holds_at_level(
    model: &SystemModel,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    qstar: &DMatrix<f64>,
    chol_inv_t: &DMatrix<f64>,
    level: f64,
) -> bool {
    let n = model.state_dim();
    let boundary = linalg::sphere_points(BOUNDARY_SAMPLES, n);
    let tol = |x: &DVector<f64>| 1e-14 * (1.0 + quad_form(x, qstar));
    for y in &boundary {
        let x = chol_inv_t * y * level;
        if decrease_margin(model, k, p, qstar, &x) < -tol(&x) {
            return false;
        }
    }
    // Interior spot checks at Halton radii.
    let dirs = linalg::sphere_points(INTERIOR_SAMPLES, n);
    for (i, y) in dirs.iter().enumerate() {
        let radius = linalg::halton(i, 1)[0];
        let x = chol_inv_t * y * (level * radius);
        if decrease_margin(model, k, p, qstar, &x) < -tol(&x) {
            return false;
        }
    }
    true
}

/// Terminal level `ε = min(ε_u, ε_v)`: `ε_u` keeps `Kx ∈ 𝒰` on the
/// ellipsoid, `ε_v` is the bisected level where the decrease condition
/// `d/dt‖x‖²_P ≤ −‖x‖²_{Q*}` holds on the sampled boundary (and interior
/// spot checks) under the nominal nonlinear dynamics.
pub fn terminal_level(
    model: &SystemModel,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    qstar: &DMatrix<f64>,
) -> Result<TerminalLevel> {
    let n = model.state_dim();
    let m = model.input_dim();
    if k.shape() != (m, n) || p.shape() != (n, n) || qstar.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "terminal ingredients",
            expected: n,
            found: p.nrows(),
        });
    }
    let chol = nalgebra::Cholesky::new(linalg::symmetrize(p))
        .ok_or_else(|| Error::Synthesis("P is not positive definite".into()))?;
    let p_inv = chol.inverse();
    // x = L⁻ᵀ y maps the unit sphere onto ‖x‖_P = 1.
    let chol_inv_t = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::Synthesis("P is not positive definite".into()))?;

    let mut eps_u = f64::INFINITY;
    for j in 0..m {
        let kj = k.row(j);
        let spread = (kj * &p_inv * kj.transpose())[(0, 0)].max(0.0).sqrt();
        if spread > 0.0 {
            let room = model.input_upper()[j].min(-model.input_lower()[j]);
            eps_u = eps_u.min(room / spread);
        }
    }
    // K = 0 leaves the input constraint inactive; cap the search.
    let upper = if eps_u.is_finite() { eps_u } else { 1e6 };

    if decrease_holds_at_level(model, k, p, qstar, &chol_inv_t, upper) {
        return Ok(TerminalLevel {
            epsilon: upper,
            epsilon_input: eps_u,
            epsilon_decrease: upper,
        });
    }
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..LEVEL_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if decrease_holds_at_level(model, k, p, qstar, &chol_inv_t, mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= 0.0 {
        return Err(Error::Synthesis(
            "decrease condition fails at every tested terminal level; the local linear feedback does not render any P-ellipsoid invariant".into(),
        ));
    }
    Ok(TerminalLevel {
        epsilon: lo.min(eps_u),
        epsilon_input: eps_u,
        epsilon_decrease: lo,
    })
}

/// Full synthesis chain from the model and weights. `kappa` overrides the
/// half-decay-rate rule when given.
pub fn synthesize(
    model: &SystemModel,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    kappa: Option<f64>,
) -> Result<(TerminalIngredients, TerminalLevel)> {
    let (a, b) = model.linearize();
    let k = lqr_gain(&a, &b, q, r)?;
    let kappa_max = choose_kappa(&a, &b, &k)? * 2.0;
    let kappa = match kappa {
        Some(kp) if kp > 0.0 && kp < kappa_max => kp,
        Some(kp) => {
            return Err(Error::Synthesis(format!(
                "κ = {kp} must lie in (0, {kappa_max}) for this closed loop"
            )))
        }
        None => choose_kappa(&a, &b, &k)?,
    };
    let qstar = q + k.transpose() * r * &k;
    let n = model.state_dim();
    let ak = &a + &b * &k + DMatrix::identity(n, n) * kappa;
    let p = solve_lyapunov(&ak, &qstar)?;
    if linalg::min_eigenvalue(&p) <= 0.0 {
        return Err(Error::Synthesis("Lyapunov solution is not positive definite".into()));
    }
    let level = terminal_level(model, &k, &p, &qstar)?;
    Ok((
        TerminalIngredients {
            k,
            kappa,
            p,
            qstar,
            epsilon: level.epsilon,
        },
        level,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_integrator_lqr() {
        let sol = lqr(&m1(0.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert_relative_eq!(sol.s[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.k[(0, 0)], -1.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_input_matrix_gives_zero_gain() {
        let k = lqr_gain(&m1(-1.0), &m1(0.0), &m1(1.0), &m1(1.0)).unwrap();
        assert_eq!(k[(0, 0)], 0.0);
    }

    #[test]
    fn unstabilizable_pair_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let err = lqr_gain(&a, &b, &DMatrix::identity(2, 2), &m1(1.0)).unwrap_err();
        match err {
            Error::Synthesis(msg) => assert!(msg.contains("1.000000"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kappa_rule() {
        assert_eq!(kappa_from_eigenvalues(&[(-1.0, 0.0), (-3.0, 0.0)]).unwrap(), 0.5);
        assert_eq!(kappa_from_eigenvalues(&[(-2.0, 4.0), (-2.0, -4.0)]).unwrap(), 1.0);
        assert!(kappa_from_eigenvalues(&[(0.1, 0.0)]).is_err());
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let p = solve_lyapunov(&(-DMatrix::identity(3, 3)), &(DMatrix::identity(3, 3) * 2.0)).unwrap();
        assert!((p - DMatrix::identity(3, 3)).amax() < 1e-14);
        let p = solve_lyapunov(&m1(-4.0), &m1(3.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 3.0 / 8.0, epsilon = 1e-15);
        assert!(solve_lyapunov(&m1(0.5), &m1(1.0)).is_err());
    }

    #[test]
    fn cart_gain_matches_reported_values() {
        let model = SystemModel::cart_damper_spring(1.4, 0.00031).unwrap();
        let (a, b) = model.linearize();
        let q = DMatrix::identity(2, 2) * 0.1;
        let r = m1(0.1);
        let sol = lqr(&a, &b, &q, &r).unwrap();
        assert!((sol.k[(0, 0)] + 0.4454).abs() < 1e-3);
        assert!((sol.k[(0, 1)] + 1.0932).abs() < 1e-3);
        assert!(sol.residual <= 1e-9 * frobenius(&q));
        assert!(is_hurwitz(&(a + b * sol.k)));
    }

    #[test]
    fn linear_model_level_equals_input_level() {
        // For linear dynamics the exact Lyapunov pair gives a global decrease.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.72, -0.336]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.8]);
        let model = SystemModel::new(
            crate::model::Dynamics::Linear { a, b },
            2,
            1,
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
            1.0,
            0.0,
        )
        .unwrap();
        let (ing, level) = synthesize(&model, &(DMatrix::identity(2, 2) * 0.1), &m1(0.1), None).unwrap();
        assert_eq!(level.epsilon, level.epsilon_input);
        assert!(ing.epsilon.is_finite());
    }

    #[test]
    fn cart_synthesis_accepts_reported_level() {
        let model = SystemModel::cart_damper_spring(1.4, 0.00031).unwrap();
        let (ing, level) = synthesize(&model, &(DMatrix::identity(2, 2) * 0.1), &m1(0.1), None).unwrap();
        assert!(ing.epsilon >= 0.03, "{level:?}");
        let (a, b) = model.linearize();
        let ak = &a + &b * &ing.k + DMatrix::identity(2, 2) * ing.kappa;
        assert!(lyapunov_residual(&ak, &ing.qstar, &ing.p) <= 1e-10 * frobenius(&ing.qstar));
        assert!(linalg::min_eigenvalue(&ing.p) > 0.0);
    }
}
