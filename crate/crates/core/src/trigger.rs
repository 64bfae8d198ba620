//! Event-triggering rules: the integral-type mechanism, its level design
//! and a pointwise-threshold baseline.
//!
//! Both rules are evaluated once per simulation step. An event is the first
//! grid time at which the condition holds, and the window deadline `t_k + T`
//! always forces an event.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sqrt_max_eigenvalue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Integral,
    Pointwise,
}

impl std::fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TriggerKind::Integral => "integral",
            TriggerKind::Pointwise => "pointwise",
        })
    }
}

/// State of the integral rule within one window. Time is tracked in whole
/// simulation steps so the deadline test is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerState {
    /// `∫ ‖x − x̂*‖_P ds` accumulated since the last event.
    pub accumulator: f64,
    pub window_start: f64,
    pub deadline: f64,
    pub delta: f64,
    /// Steps taken in the current window.
    pub steps: usize,
    /// Steps from the window start to the deadline.
    pub deadline_steps: usize,
}

impl TriggerState {
    pub fn new(window_start: f64, horizon: f64, delta: f64, h: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!("trigger level must be positive, got {delta}")));
        }
        Ok(Self {
            accumulator: 0.0,
            window_start,
            deadline: window_start + horizon,
            delta,
            steps: 0,
            deadline_steps: window_steps(horizon, h)?,
        })
    }

    /// Starts a new window at `t` and clears the accumulator.
    pub fn reset(&mut self, t: f64) {
        let horizon = self.deadline - self.window_start;
        self.accumulator = 0.0;
        self.window_start = t;
        self.deadline = t + horizon;
        self.steps = 0;
    }
}

/// Baseline rule: fire when the instantaneous error reaches `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseTrigger {
    pub sigma: f64,
    pub window_start: f64,
    pub deadline: f64,
    pub steps: usize,
    pub deadline_steps: usize,
}

impl PointwiseTrigger {
    pub fn new(window_start: f64, horizon: f64, sigma: f64, h: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("pointwise threshold must be positive, got {sigma}")));
        }
        Ok(Self {
            sigma,
            window_start,
            deadline: window_start + horizon,
            steps: 0,
            deadline_steps: window_steps(horizon, h)?,
        })
    }

    pub fn reset(&mut self, t: f64) {
        let horizon = self.deadline - self.window_start;
        self.window_start = t;
        self.deadline = t + horizon;
        self.steps = 0;
    }
}

fn window_steps(horizon: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "horizon and step must be positive, got T = {horizon}, h = {h}"
        )));
    }
    let r = horizon / h;
    let steps = r.round();
    if (r - steps).abs() > 1e-6 || steps < 1.0 {
        return Err(Error::InvalidParameter(format!("step {h} does not divide the horizon {horizon}")));
    }
    Ok(steps as usize)
}

/// Advances the integral rule by one step of length `h`, using the error at
/// the left end of the step. Returns whether an event fires at the end of
/// the step.
pub fn step_integral(ts: &mut TriggerState, x: &[f64], x_pred: &[f64], p: &DMatrix<f64>, h: f64) -> bool {
    let err = error_norm(x, x_pred, p);
    ts.accumulator += err * h;
    ts.steps += 1;
    ts.accumulator >= ts.delta || ts.steps >= ts.deadline_steps
}

/// Checks the pointwise rule after one step: `x` and `x_pred` are the values
/// at the end of the step.
pub fn step_pointwise(pt: &mut PointwiseTrigger, x: &[f64], x_pred: &[f64], p: &DMatrix<f64>) -> bool {
    pt.steps += 1;
    error_norm(x, x_pred, p) >= pt.sigma || pt.steps >= pt.deadline_steps
}

/// `‖x − x̂‖_P`.
pub fn error_norm(x: &[f64], x_pred: &[f64], p: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let di = x[i] - x_pred[i];
        let mut row = 0.0;
        for j in 0..n {
            row += p[(i, j)] * (x[j] - x_pred[j]);
        }
        acc += di * row;
    }
    acc.max(0.0).sqrt()
}

/// `∫₀^τ s·e^{Ls} ds = e^{Lτ}(τ/L − 1/L²) + 1/L²`, with a series for small
/// `Lτ` where the closed form cancels.
pub fn interval_integral(l: f64, tau: f64) -> f64 {
    let x = l * tau;
    if x.abs() < 1e-2 {
        // τ²·Σ_{k≥0} x^k / (k!·(k+2))
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 0..20 {
            if k > 0 {
                term *= x / k as f64;
            }
            sum += term / (k as f64 + 2.0);
        }
        tau * tau * sum
    } else {
        (x.exp() * (x - 1.0) + 1.0) / (l * l)
    }
}

/// Triggering level `δ = ρ·λ̄(√P)·∫₀^{βT} s·e^{Ls} ds`.
pub fn design_delta(rho: f64, l: f64, beta: f64, horizon: f64, p: &DMatrix<f64>) -> Result<f64> {
    if !(l * beta * horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "L·β·T must be positive, got L = {l}, β = {beta}, T = {horizon}"
        )));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidParameter(format!("disturbance bound must be ≥ 0, got {rho}")));
    }
    Ok(rho * sqrt_max_eigenvalue(p) * interval_integral(l, beta * horizon))
}

/// Inverts [`design_delta`] in `β`: the guaranteed minimum inter-event
/// fraction implied by an actual level `δ`. Clamped to 1.
pub fn effective_beta(delta: f64, rho: f64, l: f64, horizon: f64, p: &DMatrix<f64>) -> Result<f64> {
    if !(delta > 0.0) || !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "effective β needs δ > 0 and ρ > 0, got δ = {delta}, ρ = {rho}"
        )));
    }
    let at = |beta: f64| design_delta(rho, l, beta, horizon, p);
    if delta >= at(1.0)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if at(mid.max(f64::MIN_POSITIVE))? < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Pointwise bound `ρ·λ̄(√P)·τ·e^{Lτ}` on `‖x − x̂*‖_P` after time `τ`; with
/// `τ = β_eff·T` it gives the baseline threshold that guarantees the same
/// minimum interval as the integral rule.
pub fn pointwise_threshold(rho: f64, l: f64, tau: f64, p: &DMatrix<f64>) -> f64 {
    rho * sqrt_max_eigenvalue(p) * tau * (l * tau).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        let l = 1.0f64;
        for &tau in &[0.0099f64, 0.01, 0.0101] {
            let closed = ((l * tau).exp() * (l * tau - 1.0) + 1.0) / (l * l);
            assert!((interval_integral(l, tau) - closed).abs() <= 1e-9 * closed);
        }
        assert_eq!(interval_integral(1.4, 0.0), 0.0);
    }

    #[test]
    fn zero_disturbance_gives_zero_level() {
        let p = DMatrix::identity(2, 2);
        assert_eq!(design_delta(0.0, 1.4, 0.6, 2.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn effective_beta_round_trip() {
        let p = DMatrix::from_row_slice(2, 2, &[0.1692, 0.0572, 0.0572, 0.1391]);
        let d = design_delta(0.00031, 1.4, 0.6, 2.0, &p).unwrap();
        let b = effective_beta(d, 0.00031, 1.4, 2.0, &p).unwrap();
        assert!((b - 0.6).abs() < 1e-8);
        let big = design_delta(0.00031, 1.4, 1.0, 2.0, &p).unwrap();
        assert_eq!(effective_beta(2.0 * big, 0.00031, 1.4, 2.0, &p).unwrap(), 1.0);
        assert!(effective_beta(1e-15, 0.00031, 1.4, 2.0, &p).unwrap() < 1e-3);
    }

    #[test]
    fn constant_error_fires_after_expected_steps() {
        let p = DMatrix::identity(1, 1);
        let h = 0.01;
        let c = 0.5;
        let delta = 0.1234;
        let mut ts = TriggerState::new(0.0, 2.0, delta, h).unwrap();
        let mut steps = 0;
        loop {
            steps += 1;
            if step_integral(&mut ts, &[c], &[0.0], &p, h) {
                break;
            }
        }
        assert_eq!(steps, ((delta / c) / h).ceil() as usize);
    }

    #[test]
    fn zero_error_fires_only_at_deadline() {
        let p = DMatrix::identity(2, 2);
        let mut ts = TriggerState::new(0.0, 2.0, 1e-6, 0.01).unwrap();
        let mut pt = PointwiseTrigger::new(0.0, 2.0, 1e-6, 0.01).unwrap();
        for k in 1..=200 {
            let a = step_integral(&mut ts, &[0.0, 0.0], &[0.0, 0.0], &p, 0.01);
            let b = step_pointwise(&mut pt, &[0.0, 0.0], &[0.0, 0.0], &p);
            assert_eq!(a, k == 200);
            assert_eq!(b, k == 200);
        }
        assert_eq!(ts.accumulator, 0.0);
    }

    #[test]
    fn ramp_crosses_pointwise_threshold() {
        let p = DMatrix::identity(1, 1);
        let h = 0.01;
        let c = 0.3;
        let sigma = 0.12;
        let mut pt = PointwiseTrigger::new(0.0, 2.0, sigma, h).unwrap();
        let mut t = 0.0;
        loop {
            t += h;
            if step_pointwise(&mut pt, &[c * t], &[0.0], &p) {
                break;
            }
        }
        assert!((t - sigma / c).abs() <= h + 1e-12);
    }

    #[test]
    fn reset_moves_window() {
        let mut ts = TriggerState::new(0.0, 2.0, 1.0, 0.01).unwrap();
        ts.accumulator = 0.5;
        ts.steps = 10;
        ts.reset(1.5);
        assert_eq!(ts.accumulator, 0.0);
        assert_eq!(ts.steps, 0);
        assert!((ts.deadline - 3.5).abs() < 1e-15);
    }
}
