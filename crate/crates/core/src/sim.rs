//! Closed-loop event-triggered MPC simulation and seeded Monte-Carlo
//! comparison of the two triggering rules.
//!
//! Time is kept as an integer step index; `t = i·h`. The plant is
//! integrated with the disturbance held over each step, the prediction
//! `x̂*(·;t_k)` is rolled out alongside it with the same integrator and no
//! disturbance, and the trigger is evaluated once per step.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::certify::{certify, lemma2_check, Certificate, DesignParams, Lemma2Report, DEFAULT_N_MAX};
use crate::error::{check_dim, Error, Result};
use crate::linalg::weighted_norm_slice;
use crate::model::{rk4_step, splitmix64, step_count, DisturbanceGenerator, Rk4Workspace, SystemModel};
use crate::ocp::{self, OcpSettings, OcpSolution, OcpSpec, SolverStatus};
use crate::trigger::{
    effective_beta, error_norm, pointwise_threshold, step_integral, step_pointwise, PointwiseTrigger,
    TriggerKind, TriggerState,
};

pub const TRACE_SCHEMA_VERSION: &str = "etmpc-trace/1";

/// Tolerance on cost decrease between consecutive events, relative to `1 + J`.
const COST_DECREASE_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: SystemModel,
    pub design: DesignParams,
    pub ocp: OcpSettings,
    pub trigger: TriggerKind,
    /// Pointwise threshold; calibrated from the error bound when absent.
    pub sigma: Option<f64>,
    pub disturbance: DisturbanceGenerator,
    pub x0: DVector<f64>,
    pub duration: f64,
    pub step: f64,
    /// Seeds the disturbance realization.
    pub seed: u64,
    /// Run even if the certificate fails.
    pub exploratory: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.model.state_dim();
        check_dim("initial state", n, self.x0.len())?;
        check_dim("P", n, self.design.p.nrows())?;
        check_dim("K", self.model.input_dim(), self.design.k.nrows())?;
        self.design.validate()?;
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::InvalidParameter(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidParameter(format!("step must be positive, got {}", self.step)));
        }
        if self.disturbance.magnitude() > self.model.disturbance_bound() + 1e-15 {
            return Err(Error::InvalidParameter(format!(
                "disturbance magnitude {} exceeds the model bound {}",
                self.disturbance.magnitude(),
                self.model.disturbance_bound()
            )));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidParameter(format!("sigma must be positive, got {s}")));
            }
        }
        step_count(0.0, self.duration, self.step)?;
        self.steps_per_interval()?;
        Ok(())
    }

    /// Simulation steps per OCP control interval.
    pub fn steps_per_interval(&self) -> Result<usize> {
        let interval = self.design.horizon / self.ocp.grid as f64;
        let r = interval / self.step;
        let k = r.round();
        if k < 1.0 || (r - k).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "simulation step {} must divide the control interval {interval}",
                self.step
            )));
        }
        Ok(k as usize)
    }

    /// The same run with the other trigger.
    pub fn with_trigger(&self, kind: TriggerKind) -> Self {
        Self {
            trigger: kind,
            ..self.clone()
        }
    }

    pub fn ocp_spec(&self, t_k: f64, x: &DVector<f64>) -> OcpSpec<'_> {
        let d = &self.design;
        OcpSpec {
            model: &self.model,
            horizon: d.horizon,
            q: &d.q,
            r: &d.r,
            p: &d.p,
            alpha: d.alpha,
            epsilon: d.epsilon,
            big_m: d.big_m,
            x_init: x.clone(),
            t_k,
            settings: self.ocp,
        }
    }
}

/// Levels the run is audited against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunBounds {
    pub delta: f64,
    pub beta_eff: f64,
    /// `β_eff·T − h`.
    pub min_interval: f64,
    pub max_interval: f64,
    pub sigma: f64,
    pub error_sup_bound: Option<f64>,
    pub eps_bar: Option<f64>,
    /// `α·ε`.
    pub terminal_level: f64,
    /// `max(ε, ε̄)`.
    pub convergence_level: f64,
}

impl RunBounds {
    pub fn new(cfg: &SimConfig, cert: &Certificate) -> Result<Self> {
        let d = &cfg.design;
        let beta_eff = match cert.beta_eff {
            Some(b) => b,
            None if d.rho > 0.0 && d.delta > 0.0 => effective_beta(d.delta, d.rho, d.lipschitz, d.horizon, &d.p)?,
            None => 1.0,
        };
        let sigma = match cfg.sigma {
            Some(s) => s,
            None => pointwise_threshold(d.rho, d.lipschitz, beta_eff * d.horizon, &d.p).max(f64::MIN_POSITIVE),
        };
        Ok(Self {
            delta: d.delta.max(f64::MIN_POSITIVE),
            beta_eff,
            min_interval: beta_eff * d.horizon - cfg.step,
            max_interval: d.horizon,
            sigma,
            error_sup_bound: cert.error_sup_bound,
            eps_bar: cert.eps_bar,
            terminal_level: d.alpha * d.epsilon,
            convergence_level: d.epsilon.max(cert.eps_bar.unwrap_or(0.0)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    FeasibilityViolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    IntervalAboveHorizon,
    IntervalBelowMinimum,
    CandidateErrorBound,
    CostIncrease,
    UltimateBound,
    Lemma2,
    SolverNotOptimal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub time: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub step: usize,
    pub state: Vec<f64>,
    /// Time to the next event (or to a deadline that closes the run).
    pub interval: Option<f64>,
    pub status: SolverStatus,
    pub cost: f64,
    pub iterations: usize,
    pub max_residual: f64,
    pub worst_constraint: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowRecord {
    pub start: f64,
    pub end: f64,
    /// `max ‖x − x̂*‖_P` over the window.
    pub max_error: f64,
    pub lemma2: Lemma2Report,
    /// `sup ‖x̃(s;t_{k+1}) − x̂*(s;t_k)‖_P` of the candidate built at the
    /// window's closing event.
    pub candidate_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimTrace {
    pub trigger: TriggerKind,
    pub step: f64,
    pub horizon: f64,
    pub seed: u64,
    pub certified: bool,
    pub status: RunStatus,
    pub bounds: RunBounds,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
    /// `‖x − x̂*‖_P` before any reset at that sample.
    pub err_p: Vec<f64>,
    /// `‖x‖_P` at each sample.
    pub state_norm: Vec<f64>,
    pub accumulator: Vec<f64>,
    pub event_flags: Vec<bool>,
    pub events: Vec<EventRecord>,
    pub windows: Vec<WindowRecord>,
    pub violations: Vec<Violation>,
}

impl SimTrace {
    /// Completed inter-event intervals, including one that ends exactly at
    /// the end of the run on a firing.
    pub fn intervals(&self) -> Vec<f64> {
        self.events.iter().filter_map(|e| e.interval).collect()
    }

    pub fn all_optimal(&self) -> bool {
        self.events.iter().all(|e| e.status == SolverStatus::Optimal)
    }

    pub fn violations_of(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    /// Writes the sampled trace as CSV with header
    /// `t,x1..xn,u1..um,w1..wn,err_P,accum,event`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=n).map(|i| format!("w{i}")));
        header.extend(["err_P", "accum", "event"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.times.len() {
            let mut line = format!("{}", self.times[i]);
            for v in self.states[i].iter().chain(&self.inputs[i]).chain(&self.disturbances[i]) {
                line.push_str(&format!(",{v}"));
            }
            line.push_str(&format!(
                ",{},{},{}",
                self.err_p[i],
                self.accumulator[i],
                u8::from(self.event_flags[i])
            ));
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

enum Rule {
    Integral(TriggerState),
    Pointwise(PointwiseTrigger),
}

impl Rule {
    fn accumulator(&self) -> f64 {
        match self {
            Rule::Integral(ts) => ts.accumulator,
            Rule::Pointwise(_) => 0.0,
        }
    }

    fn reset(&mut self, t: f64) {
        match self {
            Rule::Integral(ts) => ts.reset(t),
            Rule::Pointwise(pt) => pt.reset(t),
        }
    }
}

struct Recorder<'a> {
    p: &'a nalgebra::DMatrix<f64>,
    trace: SimTrace,
    window_errors: Vec<DVector<f64>>,
    window_max: f64,
    window_start: f64,
}

impl Recorder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn row(&mut self, t: f64, x: &[f64], u: &[f64], w: &[f64], err: f64, acc: f64, event: bool) {
        let tr = &mut self.trace;
        tr.times.push(t);
        tr.states.push(x.to_vec());
        tr.inputs.push(u.to_vec());
        tr.disturbances.push(w.to_vec());
        tr.err_p.push(err);
        tr.state_norm.push(weighted_norm_slice(x, self.p));
        tr.accumulator.push(acc);
        tr.event_flags.push(event);
    }

    fn violation(&mut self, kind: ViolationKind, time: f64, detail: String) {
        self.trace.violations.push(Violation { kind, time, detail });
    }

    fn close_window(&mut self, end: f64, candidate_error: Option<f64>) {
        let lemma2 = lemma2_check(&self.window_errors, Some(self.p));
        if !lemma2.holds {
            self.violation(
                ViolationKind::Lemma2,
                end,
                format!("sup {} exceeds bound {}", lemma2.sup, lemma2.bound),
            );
        }
        self.trace.windows.push(WindowRecord {
            start: self.window_start,
            end,
            max_error: self.window_max,
            lemma2,
            candidate_error,
        });
        self.window_errors.clear();
        self.window_max = 0.0;
        self.window_start = end;
    }

    fn event(&mut self, time: f64, step: usize, x: &[f64], sol: &OcpSolution) {
        self.trace.events.push(EventRecord {
            time,
            step,
            state: x.to_vec(),
            interval: None,
            status: sol.status,
            cost: sol.cost,
            iterations: sol.iterations,
            max_residual: sol.max_residual,
            worst_constraint: sol.worst_constraint.clone(),
        });
    }
}

/// Builds the dual-mode candidate for a window starting at `t1` from the
/// previous solution: the remaining optimal inputs, then the local feedback
/// on the part of the new horizon past the old one. Inputs are sampled on
/// the new control grid.
pub fn dual_mode_candidate(cfg: &SimConfig, prev: &OcpSolution, t1: f64, x1: &DVector<f64>) -> Result<OcpSolution> {
    let spec = cfg.ocp_spec(t1, x1);
    let grid = spec.settings.grid;
    let dt = spec.interval();
    let h = spec.substep();
    let old_end = prev.t_k + cfg.design.horizon;
    let n = cfg.model.state_dim();
    let zero = vec![0.0; n];
    let mut ws = Rk4Workspace::new(n);
    let mut x = x1.clone();
    let mut inputs = Vec::with_capacity(grid);
    let mut states = Vec::with_capacity(grid + 1);
    states.push(x.clone());
    for j in 0..grid {
        let s = t1 + j as f64 * dt;
        let u = if s < old_end - 1e-9 {
            prev.input_at(s).clone()
        } else {
            let mut u = &cfg.design.k * &x;
            cfg.model.clamp_input(u.as_mut_slice());
            u
        };
        for _ in 0..spec.settings.substeps {
            rk4_step(&cfg.model, x.as_mut_slice(), u.as_slice(), &zero, h, &mut ws);
        }
        inputs.push(u);
        states.push(x.clone());
    }
    let cost = ocp::cost(&states, &inputs, &spec)?;
    Ok(OcpSolution {
        t_k: t1,
        interval: dt,
        inputs,
        states,
        cost,
        max_residual: 0.0,
        kkt_residual: f64::INFINITY,
        status: SolverStatus::Optimal,
        iterations: 0,
        worst_constraint: None,
    })
}

/// Runs the event-triggered closed loop for the configured duration.
pub fn run_closed_loop(cfg: &SimConfig) -> Result<SimTrace> {
    cfg.validate()?;
    let cert = certify(&cfg.design, DEFAULT_N_MAX)?;
    if !cert.passed && !cfg.exploratory {
        return Err(Error::NotCertified(format!(
            "condition '{}' fails; use exploratory mode to run anyway",
            cert.first_failure.clone().unwrap_or_default()
        )));
    }
    let bounds = RunBounds::new(cfg, &cert)?;
    run_with_bounds(cfg, cert.passed, bounds)
}

fn run_with_bounds(cfg: &SimConfig, certified: bool, bounds: RunBounds) -> Result<SimTrace> {
    let d = &cfg.design;
    let p = &d.p;
    let n = cfg.model.state_dim();
    let h = cfg.step;
    let total = step_count(0.0, cfg.duration, h)?;
    let spi = cfg.steps_per_interval()?;
    let grid = cfg.ocp.grid;
    let window_steps = spi * grid;
    let disturbance = cfg.disturbance.clone().with_seed(cfg.seed);

    let mut rec = Recorder {
        p,
        trace: SimTrace {
            trigger: cfg.trigger,
            step: h,
            horizon: d.horizon,
            seed: cfg.seed,
            certified,
            status: RunStatus::Completed,
            bounds,
            times: Vec::with_capacity(total + 1),
            states: Vec::with_capacity(total + 1),
            inputs: Vec::with_capacity(total + 1),
            disturbances: Vec::with_capacity(total + 1),
            err_p: Vec::with_capacity(total + 1),
            state_norm: Vec::with_capacity(total + 1),
            accumulator: Vec::with_capacity(total + 1),
            event_flags: Vec::with_capacity(total + 1),
            events: Vec::new(),
            windows: Vec::new(),
            violations: Vec::new(),
        },
        window_errors: Vec::new(),
        window_max: 0.0,
        window_start: 0.0,
    };

    let mut ws = Rk4Workspace::new(n);
    let zero = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut x = cfg.x0.clone();
    let mut pred = x.clone();

    let mut sol = ocp::solve(&cfg.ocp_spec(0.0, &x), None)?;
    rec.event(0.0, 0, x.as_slice(), &sol);
    let mut event_step = 0usize;
    let mut rule = match cfg.trigger {
        TriggerKind::Integral => Rule::Integral(TriggerState::new(0.0, d.horizon, bounds.delta, h)?),
        TriggerKind::Pointwise => Rule::Pointwise(PointwiseTrigger::new(0.0, d.horizon, bounds.sigma, h)?),
    };
    let mut row_err = 0.0;
    let mut row_acc = 0.0;
    let mut row_event = true;
    rec.window_errors.push(DVector::zeros(n));

    if !admissible(&mut rec, &sol, 0.0) {
        disturbance.sample_into(0.0, &mut w);
        rec.row(0.0, x.as_slice(), sol.inputs[0].as_slice(), &w, 0.0, 0.0, true);
        rec.trace.status = RunStatus::FeasibilityViolated;
        return Ok(rec.trace);
    }

    for i in 0..total {
        let t = i as f64 * h;
        let j = ((i - event_step) / spi).min(grid - 1);
        let u = sol.inputs[j].clone();
        disturbance.sample_into(t, &mut w);
        rec.row(t, x.as_slice(), u.as_slice(), &w, row_err, row_acc, row_event);

        let integral_fired = match &mut rule {
            Rule::Integral(ts) => step_integral(ts, x.as_slice(), pred.as_slice(), p, h),
            Rule::Pointwise(_) => false,
        };
        rk4_step(&cfg.model, x.as_mut_slice(), u.as_slice(), &w, h, &mut ws);
        rk4_step(&cfg.model, pred.as_mut_slice(), u.as_slice(), &zero, h, &mut ws);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { last_finite_time: t });
        }
        let fired = match &mut rule {
            Rule::Integral(_) => integral_fired,
            Rule::Pointwise(pt) => step_pointwise(pt, x.as_slice(), pred.as_slice(), p),
        };
        row_err = error_norm(x.as_slice(), pred.as_slice(), p);
        row_acc = rule.accumulator();
        row_event = fired;
        rec.window_errors.push(&x - &pred);
        rec.window_max = rec.window_max.max(row_err);

        if !fired {
            continue;
        }
        let now = i + 1;
        let t1 = now as f64 * h;
        let interval = (now - event_step) as f64 * h;
        if interval > bounds.max_interval + 1e-9 {
            rec.violation(
                ViolationKind::IntervalAboveHorizon,
                t1,
                format!("interval {interval} exceeds T = {}", bounds.max_interval),
            );
        }
        if interval < bounds.min_interval - 1e-9 {
            rec.violation(
                ViolationKind::IntervalBelowMinimum,
                t1,
                format!("interval {interval} below β_eff·T − h = {}", bounds.min_interval),
            );
        }
        if let Some(last) = rec.trace.events.last_mut() {
            last.interval = Some(interval);
        }
        if now == total {
            rec.close_window(t1, None);
            break;
        }

        let candidate_error = if cfg.trigger == TriggerKind::Integral {
            let e = candidate_deviation(cfg, &sol, event_step, now, window_steps, spi, &x, &pred);
            if let Some(bound) = bounds.error_sup_bound {
                if e > bound * (1.0 + 1e-9) {
                    rec.violation(
                        ViolationKind::CandidateErrorBound,
                        t1,
                        format!("candidate deviation {e} exceeds {bound}"),
                    );
                }
            }
            Some(e)
        } else {
            None
        };
        rec.close_window(t1, candidate_error);

        let warm = dual_mode_candidate(cfg, &sol, t1, &x)?;
        let next = ocp::solve(&cfg.ocp_spec(t1, &x), Some(&warm))?;
        let prev_state_norm = weighted_norm_slice(&rec.trace.events.last().expect("event").state, p);
        if prev_state_norm > bounds.terminal_level && next.cost >= sol.cost + COST_DECREASE_TOL * (1.0 + sol.cost) {
            rec.violation(
                ViolationKind::CostIncrease,
                t1,
                format!("optimal cost {} does not decrease from {}", next.cost, sol.cost),
            );
        }
        rec.event(t1, now, x.as_slice(), &next);
        sol = next;
        if !admissible(&mut rec, &sol, t1) {
            rec.row(t1, x.as_slice(), sol.inputs[0].as_slice(), &w, row_err, row_acc, true);
            rec.trace.status = RunStatus::FeasibilityViolated;
            return Ok(rec.trace);
        }
        event_step = now;
        pred = x.clone();
        rule.reset(t1);
        rec.window_errors.push(DVector::zeros(n));
    }
    if rec.trace.windows.last().is_none_or(|wr| wr.end < cfg.duration - 0.5 * h) && rec.window_errors.len() > 1 {
        // A window cut by the end of the run is still audited for the total-variation bound
        // but does not count as an inter-event interval.
        let lemma2 = lemma2_check(&rec.window_errors, Some(p));
        let start = rec.window_start;
        rec.trace.windows.push(WindowRecord {
            start,
            end: cfg.duration,
            max_error: rec.window_max,
            lemma2,
            candidate_error: None,
        });
    }
    let t_end = total as f64 * h;
    let j = ((total - event_step) / spi).min(grid - 1);
    let u = sol.inputs[j].clone();
    disturbance.sample_into(t_end, &mut w);
    rec.row(t_end, x.as_slice(), u.as_slice(), &w, row_err, row_acc, row_event);

    audit_convergence(&mut rec, &bounds);
    Ok(rec.trace)
}

fn admissible(rec: &mut Recorder<'_>, sol: &OcpSolution, t: f64) -> bool {
    match sol.status {
        SolverStatus::Optimal => true,
        SolverStatus::MaxIterations if sol.max_residual <= 1e-6 => {
            rec.violation(
                ViolationKind::SolverNotOptimal,
                t,
                format!("solver stopped at the iteration limit (kkt {:e})", sol.kkt_residual),
            );
            true
        }
        _ => false,
    }
}

/// `sup ‖x̃(s) − x̂*(s;t_k)‖_P` on `[t_{k+1}, t_k + T]`, where `x̃` starts at
/// the measured state and follows the old optimal inputs.
#[allow(clippy::too_many_arguments)]
fn candidate_deviation(
    cfg: &SimConfig,
    sol: &OcpSolution,
    event_step: usize,
    now: usize,
    window_steps: usize,
    spi: usize,
    x: &DVector<f64>,
    pred: &DVector<f64>,
) -> f64 {
    let p = &cfg.design.p;
    let n = x.len();
    let zero = vec![0.0; n];
    let mut ws = Rk4Workspace::new(n);
    let mut a = x.clone();
    let mut b = pred.clone();
    let mut sup = error_norm(a.as_slice(), b.as_slice(), p);
    for q in (now - event_step)..window_steps {
        let u = &sol.inputs[(q / spi).min(sol.inputs.len() - 1)];
        rk4_step(&cfg.model, a.as_mut_slice(), u.as_slice(), &zero, cfg.step, &mut ws);
        rk4_step(&cfg.model, b.as_mut_slice(), u.as_slice(), &zero, cfg.step, &mut ws);
        sup = sup.max(error_norm(a.as_slice(), b.as_slice(), p));
    }
    sup
}

fn audit_convergence(rec: &mut Recorder<'_>, bounds: &RunBounds) {
    let norms = rec.trace.state_norm.clone();
    let Some(first) = norms.iter().position(|v| *v <= bounds.terminal_level) else {
        return;
    };
    let limit = bounds.convergence_level + 1e-6;
    let mut worst: Option<(usize, f64)> = None;
    let mut count = 0;
    for (i, &v) in norms.iter().enumerate().skip(first) {
        if v > limit {
            count += 1;
            if worst.is_none_or(|(_, w)| v > w) {
                worst = Some((i, v));
            }
        }
    }
    if let Some((i, v)) = worst {
        let t = rec.trace.times[i];
        rec.violation(
            ViolationKind::UltimateBound,
            t,
            format!("‖x‖_P = {v} exceeds {limit} at {count} samples after entering the terminal set"),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub event_count: usize,
    pub mean_interval: Option<f64>,
    pub min_interval: Option<f64>,
    pub max_interval: Option<f64>,
    /// Events per second of simulated time.
    pub sampling_frequency: f64,
    /// First time with `‖x‖_P ≤ α·ε`.
    pub time_to_terminal: Option<f64>,
    /// `sup ‖x‖_P` over the last 20 % of the run.
    pub terminal_residual: f64,
    pub max_error: f64,
    pub max_error_per_window: Vec<f64>,
    pub violations: usize,
}

pub fn metrics(trace: &SimTrace) -> Metrics {
    let intervals = trace.intervals();
    let (mean, min, max) = if intervals.is_empty() {
        (None, None, None)
    } else {
        let sum: f64 = intervals.iter().sum();
        (
            Some(sum / intervals.len() as f64),
            intervals.iter().copied().reduce(f64::min),
            intervals.iter().copied().reduce(f64::max),
        )
    };
    let norms = &trace.state_norm;
    let time_to_terminal = norms
        .iter()
        .position(|v| *v <= trace.bounds.terminal_level)
        .map(|i| trace.times[i]);
    let duration = trace.times.last().copied().unwrap_or(0.0);
    let tail_start = 0.8 * duration;
    let terminal_residual = trace
        .times
        .iter()
        .zip(norms)
        .filter(|(t, _)| **t >= tail_start - 1e-12)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    let max_error_per_window: Vec<f64> = trace.windows.iter().map(|w| w.max_error).collect();
    Metrics {
        event_count: trace.events.len(),
        mean_interval: mean,
        min_interval: min,
        max_interval: max,
        sampling_frequency: if duration > 0.0 { trace.events.len() as f64 / duration } else { 0.0 },
        time_to_terminal,
        terminal_residual,
        max_error: max_error_per_window.iter().copied().fold(0.0, f64::max),
        max_error_per_window,
        violations: trace.violations.len(),
    }
}

/// Per-trial seed derived from the master seed.
pub fn trial_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64 + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub status: Option<RunStatus>,
    pub event_count: usize,
    pub mean_interval: Option<f64>,
    pub min_interval: Option<f64>,
    pub violations: usize,
    pub all_optimal: bool,
    pub error: Option<String>,
}

impl TrialSummary {
    fn from_result(r: &Result<SimTrace>) -> Self {
        match r {
            Ok(trace) => {
                let m = metrics(trace);
                Self {
                    status: Some(trace.status),
                    event_count: m.event_count,
                    mean_interval: m.mean_interval,
                    min_interval: m.min_interval,
                    violations: m.violations,
                    all_optimal: trace.all_optimal(),
                    error: None,
                }
            }
            Err(e) => Self {
                status: None,
                event_count: 0,
                mean_interval: None,
                min_interval: None,
                violations: 0,
                all_optimal: false,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn completed(&self) -> bool {
        self.status == Some(RunStatus::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub index: usize,
    pub seed: u64,
    pub integral: TrialSummary,
    pub pointwise: TrialSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub completed: usize,
    pub mean_event_count: f64,
    pub std_event_count: f64,
    pub mean_interval: f64,
    pub std_interval: f64,
}

fn aggregate(items: &[&TrialSummary]) -> Aggregate {
    let done: Vec<&&TrialSummary> = items.iter().filter(|s| s.completed()).collect();
    let counts: Vec<f64> = done.iter().map(|s| s.event_count as f64).collect();
    let intervals: Vec<f64> = done.iter().filter_map(|s| s.mean_interval).collect();
    let (mc, sc) = mean_std(&counts);
    let (mi, si) = mean_std(&intervals);
    Aggregate {
        completed: done.len(),
        mean_event_count: mc,
        std_event_count: sc,
        mean_interval: mi,
        std_interval: si,
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub master_seed: u64,
    pub trials: Vec<TrialResult>,
    pub integral: Aggregate,
    pub pointwise: Aggregate,
}

/// Runs `trials` matched pairs (same disturbance realization, both rules).
/// Trials run in parallel; results are ordered by trial index.
pub fn run_monte_carlo(cfg: &SimConfig, trials: usize, master_seed: u64) -> Result<MonteCarloReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trial count must be ≥ 1".into()));
    }
    cfg.validate()?;
    let cert = certify(&cfg.design, DEFAULT_N_MAX)?;
    if !cert.passed && !cfg.exploratory {
        return Err(Error::NotCertified(format!(
            "condition '{}' fails; use exploratory mode to run anyway",
            cert.first_failure.clone().unwrap_or_default()
        )));
    }
    let bounds = RunBounds::new(cfg, &cert)?;
    let results: Vec<TrialResult> = (0..trials)
        .into_par_iter()
        .map(|index| {
            let seed = trial_seed(master_seed, index);
            let run = |kind: TriggerKind| {
                let c = SimConfig {
                    seed,
                    ..cfg.with_trigger(kind)
                };
                run_with_bounds(&c, cert.passed, bounds)
            };
            TrialResult {
                index,
                seed,
                integral: TrialSummary::from_result(&run(TriggerKind::Integral)),
                pointwise: TrialSummary::from_result(&run(TriggerKind::Pointwise)),
            }
        })
        .collect();
    let integral = aggregate(&results.iter().map(|r| &r.integral).collect::<Vec<_>>());
    let pointwise = aggregate(&results.iter().map(|r| &r.pointwise).collect::<Vec<_>>());
    Ok(MonteCarloReport {
        master_seed,
        trials: results,
        integral,
        pointwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DisturbanceKind;
    use nalgebra::DMatrix;

    fn benchmark(x0: [f64; 2], rho: f64) -> SimConfig {
        let model = SystemModel::cart_damper_spring(1.4, rho).unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[-0.44536, -1.09321]);
        let q = DMatrix::identity(2, 2) * 0.1;
        let r = DMatrix::identity(1, 1) * 0.1;
        let qstar = &q + k.transpose() * &r * &k;
        let design = DesignParams {
            horizon: 2.0,
            alpha: 0.8,
            beta: 0.6,
            big_m: 10.0,
            delta: 8.1e-5,
            epsilon: 0.03,
            lipschitz: 1.4,
            rho,
            p: DMatrix::from_row_slice(2, 2, &[0.1692, 0.0572, 0.0572, 0.1391]),
            q,
            r,
            k,
            qstar,
        };
        let kind = if rho > 0.0 { DisturbanceKind::PiecewiseRandomHold } else { DisturbanceKind::Zero };
        SimConfig {
            model,
            design,
            ocp: OcpSettings::default(),
            trigger: TriggerKind::Integral,
            sigma: None,
            disturbance: DisturbanceGenerator::new(kind, rho, 0.01, 7).unwrap(),
            x0: DVector::from_column_slice(&x0),
            duration: 14.0,
            step: 0.01,
            seed: 7,
            exploratory: false,
        }
    }

    #[test]
    fn origin_without_disturbance_stays_put() {
        let trace = run_closed_loop(&benchmark([0.0, 0.0], 0.0)).unwrap();
        assert_eq!(trace.status, RunStatus::Completed);
        assert!(trace.states.iter().all(|x| x.iter().all(|v| *v == 0.0)));
        assert!(trace.intervals().iter().all(|h| (h - 2.0).abs() < 1e-9));
        assert_eq!(metrics(&trace).max_error, 0.0);
    }

    #[test]
    fn zero_disturbance_fires_at_deadline_only() {
        let trace = run_closed_loop(&benchmark([0.6, -0.4], 0.0)).unwrap();
        assert_eq!(trace.status, RunStatus::Completed);
        assert!(trace.accumulator.iter().all(|a| *a == 0.0));
        assert!(trace.err_p.iter().all(|e| *e == 0.0));
        assert_eq!(trace.intervals(), vec![2.0; 7]);
    }

    #[test]
    fn benchmark_run_respects_bounds() {
        let trace = run_closed_loop(&benchmark([0.6, -0.4], 0.00031)).unwrap();
        let m = metrics(&trace);
        eprintln!("{m:?}\n{:?}", trace.violations);
        for e in &trace.events {
            eprintln!("{} {:?} {} {:?} it={}", e.time, e.status, e.cost, e.interval, e.iterations);
        }
        assert_eq!(trace.status, RunStatus::Completed);
        assert!(trace.violations.is_empty(), "{:?}", trace.violations);
        assert!((7..=12).contains(&m.event_count));
    }

    #[test]
    fn single_window_metrics() {
        let mut cfg = benchmark([0.0, 0.0], 0.0);
        cfg.duration = 2.0;
        let m = metrics(&run_closed_loop(&cfg).unwrap());
        assert_eq!(m.event_count, 1);
        assert_eq!(m.mean_interval, Some(2.0));
    }

    #[test]
    fn csv_has_expected_header() {
        let mut cfg = benchmark([0.3, -0.2], 0.00031);
        cfg.duration = 0.5;
        let trace = run_closed_loop(&cfg).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,x2,u1,w1,w2,err_P,accum,event\n"));
        assert_eq!(text.lines().count(), 52);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_ordered() {
        let mut cfg = benchmark([0.3, -0.2], 0.00031);
        cfg.duration = 4.0;
        let a = run_monte_carlo(&cfg, 3, 11).unwrap();
        let b = run_monte_carlo(&cfg, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.iter().map(|t| t.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        let one = run_closed_loop(&SimConfig {
            seed: trial_seed(11, 0),
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(a.trials[0].integral.event_count, metrics(&one).event_count);
    }
}
