//! Continuous-time plant description, linearization, bounded disturbance
//! realizations and fixed-step RK4 integration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Parameters of the nonlinear cart–damper–spring benchmark:
/// `ẋ₁ = x₂`, `ẋ₂ = (−τ e^{−x₁} x₁ − h_d x₂ + u) / M_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartParams {
    pub mass: f64,
    pub tau: f64,
    pub damping: f64,
}

impl Default for CartParams {
    fn default() -> Self {
        Self {
            mass: 1.25,
            tau: 0.9,
            damping: 0.42,
        }
    }
}

/// One monomial-times-exponential term of a state derivative:
/// `coeff · Π xⱼ^{pⱼ} · Π uₖ^{qₖ} · exp(Σ wⱼ xⱼ)`.
///
/// Missing power / weight entries are treated as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub row: usize,
    pub coeff: f64,
    #[serde(default)]
    pub state_powers: Vec<u32>,
    #[serde(default)]
    pub input_powers: Vec<u32>,
    #[serde(default)]
    pub exp_weights: Vec<f64>,
}

impl Term {
    fn state_power(&self, j: usize) -> u32 {
        self.state_powers.get(j).copied().unwrap_or(0)
    }

    fn input_power(&self, k: usize) -> u32 {
        self.input_powers.get(k).copied().unwrap_or(0)
    }

    fn exp_weight(&self, j: usize) -> f64 {
        self.exp_weights.get(j).copied().unwrap_or(0.0)
    }

    fn value(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut v = self.coeff;
        let mut expo = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            let p = self.state_power(j);
            if p > 0 {
                v *= xj.powi(p as i32);
            }
            expo += self.exp_weight(j) * xj;
        }
        for (k, &uk) in u.iter().enumerate() {
            let q = self.input_power(k);
            if q > 0 {
                v *= uk.powi(q as i32);
            }
        }
        if expo != 0.0 {
            v *= expo.exp();
        }
        v
    }

    /// Value with variable `var` (state index, or `n + input index`) differentiated.
    fn partial(&self, x: &[f64], u: &[f64], var: usize) -> f64 {
        let n = x.len();
        let mut expo = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            expo += self.exp_weight(j) * xj;
        }
        let e = expo.exp();
        let mono = |skip: Option<usize>, reduce: bool| -> f64 {
            let mut v = self.coeff;
            for (j, &xj) in x.iter().enumerate() {
                let mut p = self.state_power(j) as i32;
                if skip == Some(j) && reduce {
                    v *= p as f64;
                    p -= 1;
                }
                if p > 0 {
                    v *= xj.powi(p);
                }
            }
            for (k, &uk) in u.iter().enumerate() {
                let mut q = self.input_power(k) as i32;
                if skip == Some(n + k) && reduce {
                    v *= q as f64;
                    q -= 1;
                }
                if q > 0 {
                    v *= uk.powi(q);
                }
            }
            v
        };
        if var < n {
            let d_poly = if self.state_power(var) > 0 {
                mono(Some(var), true)
            } else {
                0.0
            };
            (d_poly + self.exp_weight(var) * mono(None, false)) * e
        } else if self.input_power(var - n) > 0 {
            mono(Some(var), true) * e
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    CartDamperSpring(CartParams),
    /// `ẋ = A x + B u`.
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
    /// Sum of [`Term`]s per state-derivative row.
    Terms(Vec<Term>),
}

/// Continuous-time plant `ẋ = f(x, u) + ω` with input box and disturbance bound.
#[derive(Debug, Clone)]
pub struct SystemModel {
    dynamics: Dynamics,
    state_dim: usize,
    input_dim: usize,
    input_lower: DVector<f64>,
    input_upper: DVector<f64>,
    lipschitz: f64,
    disturbance_bound: f64,
}

impl SystemModel {
    pub fn new(
        dynamics: Dynamics,
        state_dim: usize,
        input_dim: usize,
        input_lower: DVector<f64>,
        input_upper: DVector<f64>,
        lipschitz: f64,
        disturbance_bound: f64,
    ) -> Result<Self> {
        if state_dim == 0 || input_dim == 0 {
            return Err(Error::InvalidParameter(
                "state and input dimensions must be positive".into(),
            ));
        }
        check_dim("input_lower", input_dim, input_lower.len())?;
        check_dim("input_upper", input_dim, input_upper.len())?;
        match &dynamics {
            Dynamics::CartDamperSpring(p) => {
                check_dim("cart state", 2, state_dim)?;
                check_dim("cart input", 1, input_dim)?;
                if !(p.mass > 0.0) {
                    return Err(Error::InvalidParameter("cart mass must be positive".into()));
                }
            }
            Dynamics::Linear { a, b } => {
                check_dim("A rows", state_dim, a.nrows())?;
                check_dim("A cols", state_dim, a.ncols())?;
                check_dim("B rows", state_dim, b.nrows())?;
                check_dim("B cols", input_dim, b.ncols())?;
            }
            Dynamics::Terms(terms) => {
                for t in terms {
                    if t.row >= state_dim
                        || t.state_powers.len() > state_dim
                        || t.exp_weights.len() > state_dim
                        || t.input_powers.len() > input_dim
                    {
                        return Err(Error::InvalidParameter(format!(
                            "term {t:?} does not fit a {state_dim}-state / {input_dim}-input model"
                        )));
                    }
                }
            }
        }
        for i in 0..input_dim {
            let (lo, hi) = (input_lower[i], input_upper[i]);
            if !(lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "input bound {i}: lower {lo} must be below upper {hi}"
                )));
            }
            if lo > 0.0 || hi < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "input box must contain the origin (channel {i}: [{lo}, {hi}])"
                )));
            }
        }
        if !(lipschitz > 0.0) || !lipschitz.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Lipschitz constant must be positive, got {lipschitz}"
            )));
        }
        if !(disturbance_bound >= 0.0) || !disturbance_bound.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "disturbance bound must be non-negative, got {disturbance_bound}"
            )));
        }
        let model = Self {
            dynamics,
            state_dim,
            input_dim,
            input_lower,
            input_upper,
            lipschitz,
            disturbance_bound,
        };
        let mut f0 = vec![0.0; state_dim];
        model.eval_into(&vec![0.0; state_dim], &vec![0.0; input_dim], &mut f0);
        let worst = f0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if worst > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "origin is not an equilibrium: |f(0,0)| = {worst:e}"
            )));
        }
        Ok(model)
    }

    /// The cart–damper–spring benchmark with input box `[−1, 1]`.
    pub fn cart_damper_spring(lipschitz: f64, disturbance_bound: f64) -> Result<Self> {
        Self::new(
            Dynamics::CartDamperSpring(CartParams::default()),
            2,
            1,
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
            lipschitz,
            disturbance_bound,
        )
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input_lower(&self) -> &DVector<f64> {
        &self.input_lower
    }

    pub fn input_upper(&self) -> &DVector<f64> {
        &self.input_upper
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn disturbance_bound(&self) -> f64 {
        self.disturbance_bound
    }

    /// Copy with a different disturbance bound.
    pub fn with_disturbance_bound(&self, rho: f64) -> Result<Self> {
        let mut m = self.clone();
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "disturbance bound must be non-negative, got {rho}"
            )));
        }
        m.disturbance_bound = rho;
        Ok(m)
    }

    pub fn clamp_input(&self, u: &mut [f64]) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = ui.clamp(self.input_lower[i], self.input_upper[i]);
        }
    }

    pub fn input_in_box(&self, u: &[f64], tol: f64) -> bool {
        u.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.input_lower[i] - tol && v <= self.input_upper[i] + tol)
    }

    /// `f(x, u)` written into `out`. Slices must have the model's dimensions.
    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::CartDamperSpring(p) => {
                out[0] = x[1];
                out[1] = (-p.tau * (-x[0]).exp() * x[0] - p.damping * x[1] + u[0]) / p.mass;
            }
            Dynamics::Linear { a, b } => {
                for i in 0..self.state_dim {
                    let mut acc = 0.0;
                    for j in 0..self.state_dim {
                        acc += a[(i, j)] * x[j];
                    }
                    for k in 0..self.input_dim {
                        acc += b[(i, k)] * u[k];
                    }
                    out[i] = acc;
                }
            }
            Dynamics::Terms(terms) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for t in terms {
                    out[t.row] += t.value(x, u);
                }
            }
        }
    }

    /// Jacobians `∂f/∂x` (n×n, row-major) and `∂f/∂u` (n×m, row-major).
    pub fn jacobian_into(&self, x: &[f64], u: &[f64], jx: &mut [f64], ju: &mut [f64]) {
        let n = self.state_dim;
        let m = self.input_dim;
        match &self.dynamics {
            Dynamics::CartDamperSpring(p) => {
                let e = (-x[0]).exp();
                jx[0] = 0.0;
                jx[1] = 1.0;
                jx[2] = -p.tau * e * (1.0 - x[0]) / p.mass;
                jx[3] = -p.damping / p.mass;
                ju[0] = 0.0;
                ju[1] = 1.0 / p.mass;
            }
            Dynamics::Linear { a, b } => {
                for i in 0..n {
                    for j in 0..n {
                        jx[i * n + j] = a[(i, j)];
                    }
                    for k in 0..m {
                        ju[i * m + k] = b[(i, k)];
                    }
                }
            }
            Dynamics::Terms(terms) => {
                jx.iter_mut().for_each(|v| *v = 0.0);
                ju.iter_mut().for_each(|v| *v = 0.0);
                for t in terms {
                    for j in 0..n {
                        jx[t.row * n + j] += t.partial(x, u, j);
                    }
                    for k in 0..m {
                        ju[t.row * m + k] += t.partial(x, u, n + k);
                    }
                }
            }
        }
    }

    /// Nominal vector field `f(x, u)` without disturbance.
    pub fn eval_nominal(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim, x.len())?;
        check_dim("input", self.input_dim, u.len())?;
        let mut out = DVector::zeros(self.state_dim);
        self.eval_into(x.as_slice(), u.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Analytic Jacobians at `(x, u)`.
    pub fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_dim("state", self.state_dim, x.len())?;
        check_dim("input", self.input_dim, u.len())?;
        let (n, m) = (self.state_dim, self.input_dim);
        let mut jx = vec![0.0; n * n];
        let mut ju = vec![0.0; n * m];
        self.jacobian_into(x.as_slice(), u.as_slice(), &mut jx, &mut ju);
        Ok((DMatrix::from_row_slice(n, n, &jx), DMatrix::from_row_slice(n, m, &ju)))
    }

    /// Central finite-difference Jacobians at `(x, u)` with step
    /// `1e-6 · (1 + ‖x‖)`.
    pub fn jacobian_fd(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_dim("state", self.state_dim, x.len())?;
        check_dim("input", self.input_dim, u.len())?;
        let (n, m) = (self.state_dim, self.input_dim);
        let step = 1e-6 * (1.0 + x.norm());
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            self.eval_into(xp.as_slice(), u.as_slice(), &mut fp);
            self.eval_into(xm.as_slice(), u.as_slice(), &mut fm);
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        for k in 0..m {
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += step;
            um[k] -= step;
            self.eval_into(x.as_slice(), up.as_slice(), &mut fp);
            self.eval_into(x.as_slice(), um.as_slice(), &mut fm);
            for i in 0..n {
                b[(i, k)] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        Ok((a, b))
    }

    /// Linearization `(A, B)` at the equilibrium `(0, 0)`.
    pub fn linearize(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.jacobian(
            &DVector::zeros(self.state_dim),
            &DVector::zeros(self.input_dim),
        )
        .expect("dimensions are the model's own")
    }

    pub fn linearize_fd(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.jacobian_fd(
            &DVector::zeros(self.state_dim),
            &DVector::zeros(self.input_dim),
        )
        .expect("dimensions are the model's own")
    }

    /// Advisory estimate of the Lipschitz constant: the largest spectral norm
    /// of `∂f/∂x` over Halton samples of the box `[lower, upper]` with `u = 0`.
    /// When `weight` is given the norm is taken in that weighted metric,
    /// `‖W^{1/2} J W^{-1/2}‖₂`. Never used to override the configured value.
    pub fn estimate_lipschitz(
        &self,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        samples: usize,
        weight: Option<&DMatrix<f64>>,
    ) -> Result<f64> {
        check_dim("box lower", self.state_dim, lower.len())?;
        check_dim("box upper", self.state_dim, upper.len())?;
        let (sqrt_w, inv_sqrt_w) = match weight {
            Some(w) => {
                let eig = crate::linalg::symmetrize(w).symmetric_eigen();
                if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
                    return Err(Error::InvalidParameter("weight must be positive definite".into()));
                }
                let v = &eig.eigenvectors;
                let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
                let si = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
                (Some(v * s * v.transpose()), Some(v * si * v.transpose()))
            }
            None => (None, None),
        };
        let u = DVector::zeros(self.input_dim);
        let mut best = 0.0f64;
        for i in 0..samples.max(1) {
            let h = crate::linalg::halton(i, self.state_dim);
            let x = DVector::from_iterator(
                self.state_dim,
                (0..self.state_dim).map(|j| lower[j] + h[j] * (upper[j] - lower[j])),
            );
            let (jx, _) = self.jacobian(&x, &u)?;
            let m = match (&sqrt_w, &inv_sqrt_w) {
                (Some(s), Some(si)) => s * jx * si,
                _ => jx,
            };
            let sv = m.singular_values();
            best = best.max(sv.max());
        }
        Ok(best)
    }
}

/// Sampled trajectory on a uniform time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// Scratch buffers for one RK4 step; avoids allocation in the inner loops.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// One classical RK4 step of `ẋ = f(x, u) + w` with `u` and `w` held
/// constant over the step. `x` is updated in place.
///
/// Plant simulation and prediction rollouts both go through this function so
/// that a zero disturbance reproduces the prediction bit for bit.
pub fn rk4_step(
    model: &SystemModel,
    x: &mut [f64],
    u: &[f64],
    w: &[f64],
    h: f64,
    ws: &mut Rk4Workspace,
) {
    let n = x.len();
    let Rk4Workspace { k1, k2, k3, k4, tmp } = ws;
    model.eval_into(x, u, k1);
    for i in 0..n {
        k1[i] += w[i];
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    model.eval_into(tmp, u, k2);
    for i in 0..n {
        k2[i] += w[i];
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    model.eval_into(tmp, u, k3);
    for i in 0..n {
        k3[i] += w[i];
        tmp[i] = x[i] + h * k3[i];
    }
    model.eval_into(tmp, u, k4);
    for i in 0..n {
        k4[i] += w[i];
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Number of steps of size `h` spanning `[t0, t1]`; `h` must divide the
/// span within `1e-9`.
pub fn step_count(t0: f64, t1: f64, h: f64) -> Result<usize> {
    if !(t1 > t0) {
        return Err(Error::InvalidParameter(format!(
            "integration span must be positive, got [{t0}, {t1}]"
        )));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
    }
    let ratio = (t1 - t0) / h;
    let steps = ratio.round();
    if (ratio - steps).abs() * h > 1e-9 || steps < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "step {h} does not divide the span {}",
            t1 - t0
        )));
    }
    Ok(steps as usize)
}

/// Fixed-step RK4 integration of `ẋ = f(x, u(t)) + ω(t)` from `t0` to `t1`.
/// Control and disturbance are sampled at each step start and held.
pub fn integrate<C, D>(
    model: &SystemModel,
    x0: &DVector<f64>,
    control: C,
    disturbance: D,
    t0: f64,
    t1: f64,
    h: f64,
) -> Result<Trajectory>
where
    C: Fn(f64) -> DVector<f64>,
    D: Fn(f64) -> DVector<f64>,
{
    check_dim("initial state", model.state_dim(), x0.len())?;
    let steps = step_count(t0, t1, h)?;
    let n = model.state_dim();
    let mut ws = Rk4Workspace::new(n);
    let mut x = x0.clone();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(x.clone());
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let u = control(t);
        let w = disturbance(t);
        check_dim("control", model.input_dim(), u.len())?;
        check_dim("disturbance", n, w.len())?;
        rk4_step(model, x.as_mut_slice(), u.as_slice(), w.as_slice(), h, &mut ws);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { last_finite_time: t });
        }
        inputs.push(u);
        times.push(t0 + (k + 1) as f64 * h);
        states.push(x.clone());
    }
    // The final sample carries the last held input.
    if let Some(last) = inputs.last().cloned() {
        inputs.push(last);
    }
    Ok(Trajectory {
        times,
        states,
        inputs: Some(inputs),
    })
}

/// SplitMix64 finalizer: a bijective avalanche mix used to derive
/// independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    ConstantDirection,
    PiecewiseRandomHold,
    Sinusoidal,
}

/// Deterministic bounded disturbance realization. Every sample satisfies
/// `‖ω(t)‖ ≤ magnitude`; samples are a pure function of `(seed, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceGenerator {
    kind: DisturbanceKind,
    magnitude: f64,
    hold_interval: f64,
    seed: u64,
    direction: Vec<f64>,
    frequency: f64,
}

impl DisturbanceGenerator {
    pub fn new(
        kind: DisturbanceKind,
        magnitude: f64,
        hold_interval: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(magnitude >= 0.0) || !magnitude.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "disturbance magnitude must be non-negative, got {magnitude}"
            )));
        }
        if kind == DisturbanceKind::PiecewiseRandomHold && !(hold_interval > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "hold interval must be positive, got {hold_interval}"
            )));
        }
        Ok(Self {
            kind,
            magnitude,
            hold_interval,
            seed,
            direction: Vec::new(),
            frequency: 0.5,
        })
    }

    pub fn zero() -> Self {
        Self {
            kind: DisturbanceKind::Zero,
            magnitude: 0.0,
            hold_interval: 1.0,
            seed: 0,
            direction: Vec::new(),
            frequency: 0.5,
        }
    }

    /// Direction used by the constant and sinusoidal kinds (normalized on
    /// use). Defaults to the last state axis.
    pub fn with_direction(mut self, direction: Vec<f64>) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidParameter("disturbance direction must be non-zero".into()));
        }
        self.direction = direction;
        Ok(self)
    }

    pub fn with_frequency(mut self, hz: f64) -> Result<Self> {
        if !(hz > 0.0) {
            return Err(Error::InvalidParameter(format!("frequency must be positive, got {hz}")));
        }
        self.frequency = hz;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn kind(&self) -> DisturbanceKind {
        self.kind
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn hold_interval(&self) -> f64 {
        self.hold_interval
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    fn unit_direction(&self, dim: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.direction.is_empty() {
            out[dim - 1] = 1.0;
            return;
        }
        let norm = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (o, d) in out.iter_mut().zip(&self.direction) {
            *o = d / norm;
        }
    }

    /// Writes `ω(t)` for a `dim`-dimensional state into `out`.
    pub fn sample_into(&self, t: f64, out: &mut [f64]) {
        let dim = out.len();
        match self.kind {
            DisturbanceKind::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            DisturbanceKind::ConstantDirection => {
                self.unit_direction(dim, out);
                out.iter_mut().for_each(|v| *v *= self.magnitude);
            }
            DisturbanceKind::Sinusoidal => {
                self.unit_direction(dim, out);
                let s = (2.0 * std::f64::consts::PI * self.frequency * t).sin();
                out.iter_mut().for_each(|v| *v *= self.magnitude * s);
            }
            DisturbanceKind::PiecewiseRandomHold => {
                let slot = (t / self.hold_interval + 1e-9).floor().max(0.0) as u64;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(slot)));
                let mut norm = 0.0;
                while norm < 1e-12 {
                    for v in out.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                    norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                }
                let radius = self.magnitude * rng.random::<f64>();
                out.iter_mut().for_each(|v| *v *= radius / norm);
            }
        }
        // Clip so rounding never pushes the norm past the bound.
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.magnitude {
            let s = self.magnitude / norm;
            out.iter_mut().for_each(|v| *v *= s);
            let again = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if again > self.magnitude {
                out.iter_mut().for_each(|v| *v *= 1.0 - 1e-15);
            }
        }
    }

    pub fn sample(&self, t: f64, dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(dim);
        self.sample_into(t, out.as_mut_slice());
        out
    }
}
