//! Bound-constrained augmented-Lagrangian solver for small dense NLPs:
//!
//! ```text
//! minimize f(z)  s.t.  c(z) = 0,  g(z) ≤ 0,  lo ≤ z ≤ hi
//! ```
//!
//! The outer loop updates Powell–Hestenes–Rockafellar multipliers and the
//! penalty; the inner loop minimizes the augmented Lagrangian over the box
//! with a projected BFGS method (dense inverse-Hessian approximation, ε-active
//! set, projected Armijo search).

/// Triplet-form sparse Jacobian.
#[derive(Debug, Clone, Default)]
pub struct SparseJacobian {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseJacobian {
    pub fn clear(&mut self) {
        self.rows.clear();
        self.cols.clear();
        self.vals.clear();
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
    }

    /// `out += Jᵀ w`.
    pub fn add_transpose_product(&self, w: &[f64], out: &mut [f64]) {
        for ((&r, &c), &v) in self.rows.iter().zip(&self.cols).zip(&self.vals) {
            out[c] += v * w[r];
        }
    }
}

pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn lower_bounds(&self) -> &[f64];
    fn upper_bounds(&self) -> &[f64];

    /// Objective value; constraint values written into `eq` and `ineq`.
    fn evaluate(&self, z: &[f64], eq: &mut [f64], ineq: &mut [f64]) -> f64;

    /// As [`NlpProblem::evaluate`], plus the objective gradient and both
    /// constraint Jacobians (cleared by the callee).
    fn evaluate_with_derivatives(
        &self,
        z: &[f64],
        grad: &mut [f64],
        eq: &mut [f64],
        ineq: &mut [f64],
        jac_eq: &mut SparseJacobian,
        jac_ineq: &mut SparseJacobian,
    ) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlSettings {
    /// Projected-gradient tolerance on the Lagrangian (plus complementarity).
    pub kkt_tol: f64,
    /// Maximum constraint violation accepted at convergence.
    pub feas_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    /// Consecutive non-improving outer iterations before declaring infeasibility.
    pub stall_limit: usize,
}

impl Default for AlSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            feas_tol: 1e-6,
            max_outer: 60,
            max_inner: 4000,
            initial_penalty: 100.0,
            max_penalty: 1e12,
            stall_limit: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintRef {
    Eq(usize),
    Ineq(usize),
}

#[derive(Debug, Clone)]
pub struct AlResult {
    pub z: Vec<f64>,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub worst_constraint: Option<ConstraintRef>,
    pub kkt_residual: f64,
    pub status: AlStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
}

/// `‖z − Π(z − g)‖_∞`.
fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for i in 0..z.len() {
        let p = (z[i] - g[i]).clamp(lo[i], hi[i]);
        m = m.max((p - z[i]).abs());
    }
    m
}

fn violation(eq: &[f64], ineq: &[f64]) -> (f64, Option<ConstraintRef>) {
    let mut worst = 0.0;
    let mut which = None;
    for (i, &c) in eq.iter().enumerate() {
        if c.abs() > worst {
            worst = c.abs();
            which = Some(ConstraintRef::Eq(i));
        }
    }
    for (i, &g) in ineq.iter().enumerate() {
        if g > worst {
            worst = g;
            which = Some(ConstraintRef::Ineq(i));
        }
    }
    (worst, which)
}

struct AugmentedLagrangian<'a, P: NlpProblem> {
    problem: &'a P,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    penalty: f64,
    eq: Vec<f64>,
    ineq: Vec<f64>,
    jac_eq: SparseJacobian,
    jac_ineq: SparseJacobian,
    w_eq: Vec<f64>,
    w_ineq: Vec<f64>,
}

impl<P: NlpProblem> AugmentedLagrangian<'_, P> {
    fn value(&mut self, z: &[f64]) -> f64 {
        let f = self.problem.evaluate(z, &mut self.eq, &mut self.ineq);
        f + self.penalty_terms()
    }

    fn penalty_terms(&self) -> f64 {
        let rho = self.penalty;
        let mut v = 0.0;
        for (c, l) in self.eq.iter().zip(&self.lambda) {
            v += l * c + 0.5 * rho * c * c;
        }
        for (g, m) in self.ineq.iter().zip(&self.mu) {
            let t = (m + rho * g).max(0.0);
            v += (t * t - m * m) / (2.0 * rho);
        }
        v
    }

    fn value_and_gradient(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        let f = self.problem.evaluate_with_derivatives(
            z,
            grad,
            &mut self.eq,
            &mut self.ineq,
            &mut self.jac_eq,
            &mut self.jac_ineq,
        );
        let rho = self.penalty;
        for i in 0..self.eq.len() {
            self.w_eq[i] = self.lambda[i] + rho * self.eq[i];
        }
        for i in 0..self.ineq.len() {
            self.w_ineq[i] = (self.mu[i] + rho * self.ineq[i]).max(0.0);
        }
        self.jac_eq.add_transpose_product(&self.w_eq, grad);
        self.jac_ineq.add_transpose_product(&self.w_ineq, grad);
        f + self.penalty_terms()
    }
}

/// Dense projected BFGS state carried across inner solves.
struct QuasiNewton {
    n: usize,
    hinv: Vec<f64>,
    fresh: bool,
}

impl QuasiNewton {
    fn new(n: usize) -> Self {
        let mut q = Self {
            n,
            hinv: vec![0.0; n * n],
            fresh: true,
        };
        q.reset(1.0);
        q
    }

    fn reset(&mut self, scale: f64) {
        self.hinv.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            self.hinv[i * self.n + i] = scale;
        }
        self.fresh = true;
    }

    fn update(&mut self, s: &[f64], y: &[f64]) {
        let n = self.n;
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        if !(sy > 1e-12 * (ss * yy).sqrt()) || sy <= 0.0 {
            return;
        }
        if self.fresh {
            self.reset(sy / yy);
            self.fresh = false;
        }
        // H⁺ = (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
        let rho = 1.0 / sy;
        let mut hy = vec![0.0; n];
        for i in 0..n {
            let row = &self.hinv[i * n..(i + 1) * n];
            hy[i] = row.iter().zip(y).map(|(a, b)| a * b).sum();
        }
        let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
        let coef = (1.0 + rho * yhy) * rho;
        for i in 0..n {
            for j in 0..n {
                self.hinv[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
            }
        }
    }
}

struct InnerOutcome {
    iterations: usize,
}

fn minimize_box<P: NlpProblem>(
    al: &mut AugmentedLagrangian<'_, P>,
    qn: &mut QuasiNewton,
    z: &mut [f64],
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    max_iter: usize,
) -> InnerOutcome {
    let n = z.len();
    project(z, lo, hi);
    let mut g = vec![0.0; n];
    let mut f = al.value_and_gradient(z, &mut g);
    let mut d = vec![0.0; n];
    let mut zt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut free = vec![false; n];
    let mut failures = 0;
    for it in 0..max_iter {
        let pg = projected_gradient_norm(z, &g, lo, hi);
        if pg <= tol || !f.is_finite() {
            return InnerOutcome { iterations: it };
        }
        let eps_act = pg.min(1e-3);
        for i in 0..n {
            let at_lo = z[i] <= lo[i] + eps_act && g[i] > 0.0;
            let at_hi = z[i] >= hi[i] - eps_act && g[i] < 0.0;
            free[i] = !(at_lo || at_hi || lo[i] == hi[i]);
        }
        let mut slope = 0.0;
        for i in 0..n {
            if !free[i] {
                d[i] = -g[i];
                continue;
            }
            let row = &qn.hinv[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                if free[j] {
                    acc += row[j] * g[j];
                }
            }
            d[i] = -acc;
            slope += g[i] * d[i];
        }
        if !(slope < 0.0) {
            qn.reset(1.0);
            for i in 0..n {
                d[i] = -g[i];
            }
        }
        // Projected backtracking (active coordinates take a gradient step so
        // the projection keeps them on their bound).
        let mut step = 1.0;
        let mut accepted = false;
        let mut ft = f;
        for _ in 0..60 {
            for i in 0..n {
                zt[i] = (z[i] + step * d[i]).clamp(lo[i], hi[i]);
            }
            let dec: f64 = (0..n).map(|i| g[i] * (zt[i] - z[i])).sum();
            if dec < 0.0 {
                ft = al.value(&zt);
                if ft.is_finite() && ft <= f + 1e-4 * dec {
                    accepted = true;
                    break;
                }
            } else if dec == 0.0 {
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            failures += 1;
            if failures >= 2 || qn.fresh {
                return InnerOutcome { iterations: it };
            }
            qn.reset(1.0);
            continue;
        }
        failures = 0;
        let _ = ft;
        f = al.value_and_gradient(&zt, &mut gt);
        for i in 0..n {
            s[i] = zt[i] - z[i];
            y[i] = gt[i] - g[i];
        }
        qn.update(&s, &y);
        z.copy_from_slice(&zt);
        g.copy_from_slice(&gt);
    }
    InnerOutcome { iterations: max_iter }
}

/// Solves the problem from `z0` (projected onto the box first).
pub fn solve<P: NlpProblem>(problem: &P, z0: &[f64], settings: &AlSettings) -> AlResult {
    let n = problem.num_vars();
    let (n_eq, n_in) = (problem.num_eq(), problem.num_ineq());
    let lo = problem.lower_bounds().to_vec();
    let hi = problem.upper_bounds().to_vec();
    let mut z = z0.to_vec();
    project(&mut z, &lo, &hi);

    let mut al = AugmentedLagrangian {
        problem,
        lambda: vec![0.0; n_eq],
        mu: vec![0.0; n_in],
        penalty: settings.initial_penalty,
        eq: vec![0.0; n_eq],
        ineq: vec![0.0; n_in],
        jac_eq: SparseJacobian::default(),
        jac_ineq: SparseJacobian::default(),
        w_eq: vec![0.0; n_eq],
        w_ineq: vec![0.0; n_in],
    };
    let mut qn = QuasiNewton::new(n);
    let mut inner_tol = 1e-3f64.max(settings.kkt_tol);
    let mut best_violation = f64::INFINITY;
    let mut prev_violation = f64::INFINITY;
    let mut stall = 0;
    let mut inner_total = 0;
    let mut grad = vec![0.0; n];
    let mut status = AlStatus::MaxIterations;
    let mut kkt = f64::INFINITY;
    let mut outer = 0;

    while outer < settings.max_outer {
        outer += 1;
        let out = minimize_box(&mut al, &mut qn, &mut z, &lo, &hi, inner_tol, settings.max_inner);
        inner_total += out.iterations;

        let _ = problem.evaluate(&z, &mut al.eq, &mut al.ineq);
        let (viol, _) = violation(&al.eq, &al.ineq);
        let rho = al.penalty;
        for i in 0..n_eq {
            al.lambda[i] += rho * al.eq[i];
        }
        for i in 0..n_in {
            al.mu[i] = (al.mu[i] + rho * al.ineq[i]).max(0.0);
        }
        kkt = kkt_residual(problem, &z, &al.lambda, &al.mu, &lo, &hi, &mut grad);

        if viol <= settings.feas_tol && kkt <= settings.kkt_tol {
            status = AlStatus::Converged;
            break;
        }
        if viol > settings.feas_tol {
            if viol < 0.9 * best_violation {
                stall = 0;
            } else {
                stall += 1;
            }
            best_violation = best_violation.min(viol);
            if stall >= settings.stall_limit {
                status = AlStatus::Infeasible;
                break;
            }
            if viol > 0.25 * prev_violation && al.penalty < settings.max_penalty {
                al.penalty = (al.penalty * 10.0).min(settings.max_penalty);
                qn.reset(1.0);
            }
        } else {
            stall = 0;
        }
        prev_violation = viol;
        inner_tol = (inner_tol * 0.1).max(0.1 * settings.kkt_tol);
    }

    let objective = problem.evaluate(&z, &mut al.eq, &mut al.ineq);
    let (max_violation, worst_constraint) = violation(&al.eq, &al.ineq);
    AlResult {
        z,
        eq_multipliers: al.lambda,
        ineq_multipliers: al.mu,
        objective,
        max_violation,
        worst_constraint,
        kkt_residual: kkt,
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
    }
}

/// Projected Lagrangian gradient plus inequality complementarity, in the
/// max norm.
pub fn kkt_residual<P: NlpProblem>(
    problem: &P,
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
    lo: &[f64],
    hi: &[f64],
    grad: &mut [f64],
) -> f64 {
    let mut eq = vec![0.0; problem.num_eq()];
    let mut ineq = vec![0.0; problem.num_ineq()];
    let mut je = SparseJacobian::default();
    let mut ji = SparseJacobian::default();
    problem.evaluate_with_derivatives(z, grad, &mut eq, &mut ineq, &mut je, &mut ji);
    je.add_transpose_product(lambda, grad);
    ji.add_transpose_product(mu, grad);
    let stationarity = projected_gradient_norm(z, grad, lo, hi);
    let complementarity = ineq
        .iter()
        .zip(mu)
        .map(|(g, m)| (-g).min(*m).abs())
        .fold(0.0f64, f64::max);
    stationarity.max(complementarity)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x−2)² + (y−1)²  s.t.  x + y = 1,  x² − y ≤ 0,  y ∈ [0, 0.8].
    struct Toy {
        lo: Vec<f64>,
        hi: Vec<f64>,
    }

    impl NlpProblem for Toy {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_eq(&self) -> usize {
            1
        }
        fn num_ineq(&self) -> usize {
            1
        }
        fn lower_bounds(&self) -> &[f64] {
            &self.lo
        }
        fn upper_bounds(&self) -> &[f64] {
            &self.hi
        }
        fn evaluate(&self, z: &[f64], eq: &mut [f64], ineq: &mut [f64]) -> f64 {
            eq[0] = z[0] + z[1] - 1.0;
            ineq[0] = z[0] * z[0] - z[1];
            (z[0] - 2.0).powi(2) + (z[1] - 1.0).powi(2)
        }
        fn evaluate_with_derivatives(
            &self,
            z: &[f64],
            grad: &mut [f64],
            eq: &mut [f64],
            ineq: &mut [f64],
            je: &mut SparseJacobian,
            ji: &mut SparseJacobian,
        ) -> f64 {
            je.clear();
            ji.clear();
            grad[0] = 2.0 * (z[0] - 2.0);
            grad[1] = 2.0 * (z[1] - 1.0);
            je.push(0, 0, 1.0);
            je.push(0, 1, 1.0);
            ji.push(0, 0, 2.0 * z[0]);
            ji.push(0, 1, -1.0);
            self.evaluate(z, eq, ineq)
        }
    }

    #[test]
    fn solves_small_constrained_problem() {
        let p = Toy {
            lo: vec![-10.0, 0.0],
            hi: vec![10.0, 0.8],
        };
        let r = solve(&p, &[0.0, 0.0], &AlSettings::default());
        assert_eq!(r.status, AlStatus::Converged);
        // On x + y = 1 the inequality x² ≤ 1 − x binds at x = (√5 − 1)/2.
        let x = (5f64.sqrt() - 1.0) / 2.0;
        assert!((r.z[0] - x).abs() < 1e-5, "{:?}", r.z);
        assert!((r.z[1] - (1.0 - x)).abs() < 1e-5);
        assert!(r.max_violation <= 1e-6);
    }

    #[test]
    fn detects_infeasibility() {
        // x + y = 1 with y ≤ 0.8 and x² ≤ y cannot hold when y ∈ [0, 0.05].
        let p = Toy {
            lo: vec![-10.0, 0.0],
            hi: vec![10.0, 0.05],
        };
        let r = solve(&p, &[0.0, 0.0], &AlSettings::default());
        assert_eq!(r.status, AlStatus::Infeasible);
        assert!(r.max_violation > 1e-6);
        assert!(r.worst_constraint.is_some());
    }

    #[test]
    fn bfgs_update_preserves_secant() {
        let mut qn = QuasiNewton::new(3);
        let s = [0.3, -0.1, 0.2];
        let y = [0.5, 0.1, 0.4];
        qn.update(&s, &y);
        for i in 0..3 {
            let hy: f64 = (0..3).map(|j| qn.hinv[i * 3 + j] * y[j]).sum();
            assert!((hy - s[i]).abs() < 1e-12);
        }
    }
}
