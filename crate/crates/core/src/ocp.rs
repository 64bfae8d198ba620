//! Finite-horizon robust optimal control problem, transcribed by direct
//! multiple shooting and solved with the augmented-Lagrangian method in
//! [`crate::nlp`].
//!
//! Decision vector layout: `z = [x_0, …, x_N, u_0, …, u_{N−1}]`. The first
//! node is pinned to the measured state through its bounds, each input is
//! boxed, shooting defects are equalities and the tightened `P`-norm bound
//! is imposed at nodes `1..=N` (the last one is the terminal constraint).

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{quad_form_slice, weighted_norm_slice};
use crate::model::{rk4_step, Rk4Workspace, SystemModel};
use crate::nlp::{self, AlSettings, AlStatus, ConstraintRef, NlpProblem, SparseJacobian};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpSettings {
    /// Number of piecewise-constant control intervals.
    pub grid: usize,
    /// RK4 steps per control interval.
    pub substeps: usize,
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for OcpSettings {
    fn default() -> Self {
        Self {
            grid: 40,
            substeps: 5,
            kkt_tol: 1e-6,
            feas_tol: 1e-6,
            max_outer: 60,
            max_inner: 4000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSpec<'a> {
    pub model: &'a SystemModel,
    pub horizon: f64,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub p: &'a DMatrix<f64>,
    pub alpha: f64,
    pub epsilon: f64,
    /// Contraction factor `M ≥ 1`: the bound starts at `M·α·ε`.
    pub big_m: f64,
    pub x_init: DVector<f64>,
    pub t_k: f64,
    pub settings: OcpSettings,
}

impl OcpSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        let n = self.model.state_dim();
        let m = self.model.input_dim();
        check_dim("OCP initial state", n, self.x_init.len())?;
        check_dim("OCP Q", n, self.q.nrows())?;
        check_dim("OCP Q", n, self.q.ncols())?;
        check_dim("OCP P", n, self.p.nrows())?;
        check_dim("OCP P", n, self.p.ncols())?;
        check_dim("OCP R", m, self.r.nrows())?;
        check_dim("OCP R", m, self.r.ncols())?;
        let s = &self.settings;
        if s.grid < 10 {
            return Err(Error::InvalidParameter(format!(
                "OCP grid must have at least 10 intervals, got {}",
                s.grid
            )));
        }
        if s.substeps == 0 {
            return Err(Error::InvalidParameter("OCP substeps must be ≥ 1".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.big_m >= 1.0) {
            return Err(Error::InvalidParameter(format!("M must be ≥ 1, got {}", self.big_m)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(s.kkt_tol > 0.0 && s.feas_tol > 0.0) {
            return Err(Error::InvalidParameter("solver tolerances must be positive".into()));
        }
        if self.x_init.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("initial state is not finite".into()));
        }
        Ok(())
    }

    /// Length of one control interval.
    pub fn interval(&self) -> f64 {
        self.horizon / self.settings.grid as f64
    }

    /// RK4 step used inside one control interval.
    pub fn substep(&self) -> f64 {
        self.interval() / self.settings.substeps as f64
    }

    /// Bound at node `j` of the grid.
    pub fn node_bound(&self, j: usize) -> f64 {
        let frac = j as f64 / self.settings.grid as f64;
        bound_at_fraction(frac, self)
    }
}

fn bound_at_fraction(frac: f64, spec: &OcpSpec<'_>) -> f64 {
    ((1.0 - frac) * spec.big_m + frac) * spec.alpha * spec.epsilon
}

/// Tightened level `((t_k+T−s)·M + (s−t_k))·α·ε / T` for `s ∈ [t_k, t_k+T]`.
pub fn robustness_bound(s: f64, t_k: f64, spec: &OcpSpec<'_>) -> Result<f64> {
    let t = spec.horizon;
    let slack = 1e-12 * (1.0 + t_k.abs() + t);
    if !(s >= t_k - slack && s <= t_k + t + slack) {
        return Err(Error::InvalidParameter(format!(
            "time {s} outside the prediction window [{t_k}, {}]",
            t_k + t
        )));
    }
    let frac = ((s - t_k) / t).clamp(0.0, 1.0);
    Ok(bound_at_fraction(frac, spec))
}

/// Trapezoidal stage cost over the state nodes, exact integral of the
/// piecewise-constant input term, plus the terminal weight.
pub fn cost(states: &[DVector<f64>], inputs: &[DVector<f64>], spec: &OcpSpec<'_>) -> Result<f64> {
    let n_int = inputs.len();
    if n_int == 0 {
        return Err(Error::InvalidParameter("input grid is empty".into()));
    }
    check_dim("cost state grid", n_int + 1, states.len())?;
    let dt = spec.horizon / n_int as f64;
    let mut j = 0.0;
    for k in 0..n_int {
        let qa = quad_form_slice(states[k].as_slice(), spec.q);
        let qb = quad_form_slice(states[k + 1].as_slice(), spec.q);
        j += 0.5 * dt * (qa + qb) + dt * quad_form_slice(inputs[k].as_slice(), spec.r);
    }
    Ok(j + quad_form_slice(states[n_int].as_slice(), spec.p))
}

/// Rolls the nominal model out on the OCP grid under `inputs`.
pub fn rollout(spec: &OcpSpec<'_>, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let n = spec.model.state_dim();
    let h = spec.substep();
    let zero = vec![0.0; n];
    let mut ws = Rk4Workspace::new(n);
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(x.clone());
    for (k, u) in inputs.iter().enumerate() {
        check_dim("rollout input", spec.model.input_dim(), u.len())?;
        for _ in 0..spec.settings.substeps {
            rk4_step(spec.model, x.as_mut_slice(), u.as_slice(), &zero, h, &mut ws);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged {
                last_finite_time: spec.t_k + k as f64 * spec.interval(),
            });
        }
        out.push(x.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub t_k: f64,
    pub interval: f64,
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    /// Largest violation of the node bounds, `max_j (‖x_j‖_P − b_j)⁺`.
    pub max_residual: f64,
    pub kkt_residual: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub worst_constraint: Option<String>,
}

impl OcpSolution {
    pub fn grid(&self) -> usize {
        self.inputs.len()
    }

    /// Piecewise-constant input at absolute time `s` (right-continuous; the
    /// last input is held past the horizon).
    pub fn input_at(&self, s: f64) -> &DVector<f64> {
        let idx = ((s - self.t_k) / self.interval + 1e-9).floor();
        let idx = if idx < 0.0 { 0 } else { idx as usize };
        &self.inputs[idx.min(self.inputs.len() - 1)]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolverStatus::Optimal
    }
}

fn node_violation(spec: &OcpSpec<'_>, states: &[DVector<f64>]) -> (f64, Option<usize>) {
    let mut worst = 0.0;
    let mut which = None;
    for (j, x) in states.iter().enumerate() {
        let v = weighted_norm_slice(x.as_slice(), spec.p) - spec.node_bound(j);
        if v > worst {
            worst = v;
            which = Some(j);
        }
    }
    (worst, which)
}

fn describe_node(spec: &OcpSpec<'_>, j: usize) -> String {
    if j == spec.settings.grid {
        "terminal level at s = t_k + T".to_string()
    } else {
        format!("robustness bound at node {j} (s = t_k + {:.6})", j as f64 * spec.interval())
    }
}

struct Scratch {
    x: Vec<f64>,
    a: Vec<f64>,
    sx: Vec<f64>,
    su: Vec<f64>,
    ax: Vec<f64>,
    au: Vec<f64>,
    k: [Vec<f64>; 4],
    kx: [Vec<f64>; 4],
    ku: [Vec<f64>; 4],
    jx: Vec<f64>,
    ju: Vec<f64>,
    zero: Vec<f64>,
    ws: Rk4Workspace,
}

impl Scratch {
    fn new(n: usize, m: usize) -> Self {
        let vn = || vec![0.0; n];
        let vnn = || vec![0.0; n * n];
        let vnm = || vec![0.0; n * m];
        Self {
            x: vn(),
            a: vn(),
            sx: vnn(),
            su: vnm(),
            ax: vnn(),
            au: vnm(),
            k: [vn(), vn(), vn(), vn()],
            kx: [vnn(), vnn(), vnn(), vnn()],
            ku: [vnm(), vnm(), vnm(), vnm()],
            jx: vnn(),
            ju: vnm(),
            zero: vn(),
            ws: Rk4Workspace::new(n),
        }
    }
}

/// One RK4 step together with the forward sensitivities `∂x⁺/∂x₀` (`sx`,
/// n×n) and `∂x⁺/∂u` (`su`, n×m), row-major. The state update uses the same
/// arithmetic as [`rk4_step`].
fn sensitivity_step(model: &SystemModel, u: &[f64], h: f64, s: &mut Scratch) {
    let n = s.x.len();
    let m = u.len();
    s.a.copy_from_slice(&s.x);
    s.ax.copy_from_slice(&s.sx);
    s.au.copy_from_slice(&s.su);
    for stage in 0..4 {
        model.eval_into(&s.a, u, &mut s.k[stage]);
        model.jacobian_into(&s.a, u, &mut s.jx, &mut s.ju);
        let (kx, ku) = (&mut s.kx[stage], &mut s.ku[stage]);
        for i in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += s.jx[i * n + l] * s.ax[l * n + c];
                }
                kx[i * n + c] = acc;
            }
            for c in 0..m {
                let mut acc = s.ju[i * m + c];
                for l in 0..n {
                    acc += s.jx[i * n + l] * s.au[l * m + c];
                }
                ku[i * m + c] = acc;
            }
        }
        if stage < 3 {
            let c = if stage < 2 { 0.5 * h } else { h };
            for i in 0..n {
                s.a[i] = s.x[i] + c * s.k[stage][i];
            }
            for i in 0..n * n {
                s.ax[i] = s.sx[i] + c * s.kx[stage][i];
            }
            for i in 0..n * m {
                s.au[i] = s.su[i] + c * s.ku[stage][i];
            }
        }
    }
    let w = h / 6.0;
    for i in 0..n {
        s.x[i] += w * (s.k[0][i] + 2.0 * s.k[1][i] + 2.0 * s.k[2][i] + s.k[3][i]);
    }
    for i in 0..n * n {
        s.sx[i] += w * (s.kx[0][i] + 2.0 * s.kx[1][i] + 2.0 * s.kx[2][i] + s.kx[3][i]);
    }
    for i in 0..n * m {
        s.su[i] += w * (s.ku[0][i] + 2.0 * s.ku[1][i] + 2.0 * s.ku[2][i] + s.ku[3][i]);
    }
}

struct Transcription<'s, 'a> {
    spec: &'s OcpSpec<'a>,
    n: usize,
    m: usize,
    grid: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    bounds: Vec<f64>,
    scratch: RefCell<Scratch>,
}

impl<'s, 'a> Transcription<'s, 'a> {
    fn new(spec: &'s OcpSpec<'a>) -> Self {
        let n = spec.model.state_dim();
        let m = spec.model.input_dim();
        let grid = spec.settings.grid;
        let nv = (grid + 1) * n + grid * m;
        let mut lo = vec![f64::NEG_INFINITY; nv];
        let mut hi = vec![f64::INFINITY; nv];
        for i in 0..n {
            lo[i] = spec.x_init[i];
            hi[i] = spec.x_init[i];
        }
        for j in 0..grid {
            for c in 0..m {
                lo[(grid + 1) * n + j * m + c] = spec.model.input_lower()[c];
                hi[(grid + 1) * n + j * m + c] = spec.model.input_upper()[c];
            }
        }
        let bounds = (0..=grid).map(|j| spec.node_bound(j)).collect();
        Self {
            spec,
            n,
            m,
            grid,
            lo,
            hi,
            bounds,
            scratch: RefCell::new(Scratch::new(n, m)),
        }
    }

    fn xi(&self, j: usize) -> usize {
        j * self.n
    }

    fn ui(&self, j: usize) -> usize {
        (self.grid + 1) * self.n + j * self.m
    }

    fn pack(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Vec<f64> {
        let mut z = vec![0.0; self.lo.len()];
        for (j, x) in states.iter().enumerate() {
            z[self.xi(j)..self.xi(j) + self.n].copy_from_slice(x.as_slice());
        }
        for (j, u) in inputs.iter().enumerate() {
            z[self.ui(j)..self.ui(j) + self.m].copy_from_slice(u.as_slice());
        }
        z
    }

    fn unpack_inputs(&self, z: &[f64]) -> Vec<DVector<f64>> {
        (0..self.grid)
            .map(|j| DVector::from_column_slice(&z[self.ui(j)..self.ui(j) + self.m]))
            .collect()
    }

    fn objective_and_ineq(&self, z: &[f64], ineq: &mut [f64], grad: Option<&mut [f64]>) -> f64 {
        let spec = self.spec;
        let (n, m, grid) = (self.n, self.m, self.grid);
        let dt = spec.interval();
        let mut f = 0.0;
        for j in 0..=grid {
            let x = &z[self.xi(j)..self.xi(j) + n];
            let w = if j == 0 || j == grid { 0.5 * dt } else { dt };
            f += w * quad_form_slice(x, spec.q);
            if j >= 1 {
                let b = self.bounds[j];
                ineq[j - 1] = (quad_form_slice(x, spec.p) - b * b) / (2.0 * b);
            }
        }
        let xn = &z[self.xi(grid)..self.xi(grid) + n];
        f += quad_form_slice(xn, spec.p);
        for j in 0..grid {
            f += dt * quad_form_slice(&z[self.ui(j)..self.ui(j) + m], spec.r);
        }
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..=grid {
                let base = self.xi(j);
                let w = if j == 0 || j == grid { 0.5 * dt } else { dt };
                for r in 0..n {
                    let mut qx = 0.0;
                    for c in 0..n {
                        qx += spec.q[(r, c)] * z[base + c];
                    }
                    g[base + r] += 2.0 * w * qx;
                }
            }
            let base = self.xi(grid);
            for r in 0..n {
                let mut px = 0.0;
                for c in 0..n {
                    px += spec.p[(r, c)] * z[base + c];
                }
                g[base + r] += 2.0 * px;
            }
            for j in 0..grid {
                let base = self.ui(j);
                for r in 0..m {
                    let mut ru = 0.0;
                    for c in 0..m {
                        ru += spec.r[(r, c)] * z[base + c];
                    }
                    g[base + r] += 2.0 * dt * ru;
                }
            }
        }
        f
    }
}

impl NlpProblem for Transcription<'_, '_> {
    fn num_vars(&self) -> usize {
        self.lo.len()
    }

    fn num_eq(&self) -> usize {
        self.grid * self.n
    }

    fn num_ineq(&self) -> usize {
        self.grid
    }

    fn lower_bounds(&self) -> &[f64] {
        &self.lo
    }

    fn upper_bounds(&self) -> &[f64] {
        &self.hi
    }

    fn evaluate(&self, z: &[f64], eq: &mut [f64], ineq: &mut [f64]) -> f64 {
        let spec = self.spec;
        let n = self.n;
        let h = spec.substep();
        let mut guard = self.scratch.borrow_mut();
        let s = &mut *guard;
        for j in 0..self.grid {
            s.x.copy_from_slice(&z[self.xi(j)..self.xi(j) + n]);
            let u = &z[self.ui(j)..self.ui(j) + self.m];
            for _ in 0..spec.settings.substeps {
                rk4_step(spec.model, &mut s.x, u, &s.zero, h, &mut s.ws);
            }
            let next = self.xi(j + 1);
            for i in 0..n {
                eq[j * n + i] = z[next + i] - s.x[i];
            }
        }
        drop(guard);
        self.objective_and_ineq(z, ineq, None)
    }

    fn evaluate_with_derivatives(
        &self,
        z: &[f64],
        grad: &mut [f64],
        eq: &mut [f64],
        ineq: &mut [f64],
        jac_eq: &mut SparseJacobian,
        jac_ineq: &mut SparseJacobian,
    ) -> f64 {
        let spec = self.spec;
        let (n, m) = (self.n, self.m);
        let h = spec.substep();
        jac_eq.clear();
        jac_ineq.clear();
        let mut guard = self.scratch.borrow_mut();
        let s = &mut *guard;
        for j in 0..self.grid {
            s.x.copy_from_slice(&z[self.xi(j)..self.xi(j) + n]);
            s.sx.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                s.sx[i * n + i] = 1.0;
            }
            s.su.iter_mut().for_each(|v| *v = 0.0);
            let u = &z[self.ui(j)..self.ui(j) + m];
            for _ in 0..spec.settings.substeps {
                sensitivity_step(spec.model, u, h, s);
            }
            let next = self.xi(j + 1);
            for i in 0..n {
                let row = j * n + i;
                eq[row] = z[next + i] - s.x[i];
                jac_eq.push(row, next + i, 1.0);
                for c in 0..n {
                    jac_eq.push(row, self.xi(j) + c, -s.sx[i * n + c]);
                }
                for c in 0..m {
                    jac_eq.push(row, self.ui(j) + c, -s.su[i * m + c]);
                }
            }
        }
        drop(guard);
        for j in 1..=self.grid {
            let base = self.xi(j);
            let b = self.bounds[j];
            for r in 0..n {
                let mut px = 0.0;
                for c in 0..n {
                    px += spec.p[(r, c)] * z[base + c];
                }
                jac_ineq.push(j - 1, base + r, px / b);
            }
        }
        self.objective_and_ineq(z, ineq, Some(grad))
    }
}

fn describe_constraint(spec: &OcpSpec<'_>, c: ConstraintRef) -> String {
    let n = spec.model.state_dim();
    match c {
        ConstraintRef::Eq(row) => format!("shooting defect on interval {} component {}", row / n, row % n),
        ConstraintRef::Ineq(row) => describe_node(spec, row + 1),
    }
}

/// Solves the OCP. A supplied warm start must live on the same grid and
/// anchor time; its inputs seed the solver and, when feasible, act as an
/// incumbent that the returned solution never exceeds in cost.
pub fn solve(spec: &OcpSpec<'_>, warm_start: Option<&OcpSolution>) -> Result<OcpSolution> {
    spec.validate()?;
    let grid = spec.settings.grid;
    let m = spec.model.input_dim();
    let tol = spec.settings.feas_tol;

    let b0 = spec.node_bound(0);
    let x0_norm = weighted_norm_slice(spec.x_init.as_slice(), spec.p);
    if x0_norm > b0 + tol {
        let inputs = vec![DVector::zeros(m); grid];
        let states = rollout(spec, &spec.x_init, &inputs)?;
        let j = cost(&states, &inputs, spec)?;
        return Ok(OcpSolution {
            t_k: spec.t_k,
            interval: spec.interval(),
            inputs,
            states,
            cost: j,
            max_residual: x0_norm - b0,
            kkt_residual: f64::INFINITY,
            status: SolverStatus::Infeasible,
            iterations: 0,
            worst_constraint: Some(describe_node(spec, 0)),
        });
    }

    let mut incumbent: Option<OcpSolution> = None;
    let init_inputs: Vec<DVector<f64>> = match warm_start {
        Some(ws) => {
            if ws.inputs.len() != grid {
                return Err(Error::DimensionMismatch {
                    context: "warm-start grid",
                    expected: grid,
                    found: ws.inputs.len(),
                });
            }
            let mut inputs = ws.inputs.clone();
            for u in inputs.iter_mut() {
                check_dim("warm-start input", m, u.len())?;
                spec.model.clamp_input(u.as_mut_slice());
            }
            let states = rollout(spec, &spec.x_init, &inputs)?;
            let (viol, _) = node_violation(spec, &states);
            if viol <= tol {
                let j = cost(&states, &inputs, spec)?;
                incumbent = Some(OcpSolution {
                    t_k: spec.t_k,
                    interval: spec.interval(),
                    inputs: inputs.clone(),
                    states,
                    cost: j,
                    max_residual: viol,
                    kkt_residual: f64::INFINITY,
                    status: SolverStatus::Optimal,
                    iterations: 0,
                    worst_constraint: None,
                });
            }
            inputs
        }
        None => vec![DVector::zeros(m); grid],
    };
    let init_states = rollout(spec, &spec.x_init, &init_inputs)?;

    let problem = Transcription::new(spec);
    let z0 = problem.pack(&init_states, &init_inputs);
    let settings = AlSettings {
        kkt_tol: spec.settings.kkt_tol,
        // Defects are driven well below the node tolerance so that the
        // re-simulated trajectory still satisfies the bounds.
        feas_tol: 1e-2 * tol,
        max_outer: spec.settings.max_outer,
        max_inner: spec.settings.max_inner,
        ..AlSettings::default()
    };
    let res = nlp::solve(&problem, &z0, &settings);

    let inputs = problem.unpack_inputs(&res.z);
    let states = rollout(spec, &spec.x_init, &inputs)?;
    let (viol, worst_node) = node_violation(spec, &states);
    let j = cost(&states, &inputs, spec)?;
    let iterations = res.inner_iterations;
    let status = match res.status {
        AlStatus::Infeasible => SolverStatus::Infeasible,
        _ if viol > tol => {
            if res.status == AlStatus::Converged {
                SolverStatus::MaxIterations
            } else if res.max_violation > tol {
                SolverStatus::Infeasible
            } else {
                SolverStatus::MaxIterations
            }
        }
        AlStatus::Converged => SolverStatus::Optimal,
        AlStatus::MaxIterations => SolverStatus::MaxIterations,
    };
    let worst_constraint = if status == SolverStatus::Optimal {
        None
    } else if let Some(c) = res.worst_constraint.filter(|_| res.max_violation > tol) {
        Some(describe_constraint(spec, c))
    } else {
        worst_node.map(|w| describe_node(spec, w))
    };
    let candidate = OcpSolution {
        t_k: spec.t_k,
        interval: spec.interval(),
        inputs,
        states,
        cost: j,
        max_residual: viol,
        kkt_residual: res.kkt_residual,
        status,
        iterations,
        worst_constraint,
    };
    match incumbent {
        Some(mut inc) if candidate.status != SolverStatus::Optimal || inc.cost < candidate.cost => {
            inc.iterations = iterations;
            inc.kkt_residual = candidate.kkt_residual;
            Ok(inc)
        }
        _ => Ok(candidate),
    }
}
