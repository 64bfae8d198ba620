//! Closed-form feasibility and stability certificates for a design tuple.
//!
//! Every check is an explicit inequality `lhs ≤ rhs`; records carry both
//! sides and the margin `rhs − lhs`, so a certificate is informative even
//! when it fails.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, max_eigenvalue, min_eigenvalue, sqrt_max_eigenvalue, to_rows, weighted_norm};
use crate::trigger::{design_delta, effective_beta, interval_integral};

pub const SCHEMA_VERSION: &str = "etmpc-certificate/1";

/// Default upper end of the search for the smallest admissible `n`.
pub const DEFAULT_N_MAX: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct DesignParams {
    pub horizon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub big_m: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub lipschitz: f64,
    pub rho: f64,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `Q + KᵀRK`.
    pub qstar: DMatrix<f64>,
}

impl DesignParams {
    pub fn validate(&self) -> Result<()> {
        let n = self.p.nrows();
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !self.p.is_square() || self.q.shape() != (n, n) || self.qstar.shape() != (n, n) {
            return bad("P, Q and Q* must be square of the state dimension".into());
        }
        let m = self.r.nrows();
        if !self.r.is_square() || self.k.shape() != (m, n) {
            return bad(format!("K must be {m}×{n} and R square"));
        }
        for (name, mat) in [("P", &self.p), ("Q", &self.q), ("R", &self.r), ("Q*", &self.qstar)] {
            if !is_symmetric(mat, 1e-9) {
                return bad(format!("{name} is not symmetric"));
            }
            if min_eigenvalue(mat) <= 0.0 {
                return bad(format!("{name} is not positive definite"));
            }
        }
        for (name, v) in [
            ("T", self.horizon),
            ("epsilon", self.epsilon),
            ("L", self.lipschitz),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0,1], got {}", self.beta));
        }
        if !(self.big_m >= 1.0) {
            return bad(format!("M must be ≥ 1, got {}", self.big_m));
        }
        if !(self.delta >= 0.0) || !(self.rho >= 0.0) {
            return bad("delta and rho must be non-negative".into());
        }
        Ok(())
    }

    fn lbt(&self) -> f64 {
        self.lipschitz * self.beta * self.horizon
    }

    /// `L²βT / (LβT − 1)`.
    fn gain(&self) -> f64 {
        let l = self.lipschitz;
        l * l * self.beta * self.horizon / (self.lbt() - 1.0)
    }

    /// `e^{L(1−β)T}`.
    fn tail_growth(&self) -> f64 {
        (self.lipschitz * (1.0 - self.beta) * self.horizon).exp()
    }

    fn require_precondition(&self) -> Result<()> {
        if self.lbt() > 1.0 {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "L·β·T = {} must exceed 1",
                self.lbt()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionRecord {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// `rhs − lhs`.
    pub margin: f64,
}

impl ConditionRecord {
    fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        let margin = rhs - lhs;
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            satisfied: margin >= 0.0,
            margin,
        }
    }
}

/// Disturbance-size, horizon and contraction-rate conditions, in that order.
pub fn check_feasibility(params: &DesignParams) -> Result<[ConditionRecord; 3]> {
    params.validate()?;
    params.require_precondition()?;
    let (l, b, t, a, e) = (params.lipschitz, params.beta, params.horizon, params.alpha, params.epsilon);
    let growth = params.gain() * params.tail_growth();
    let disturbance = growth * params.rho * sqrt_max_eigenvalue(&params.p) * interval_integral(l, b * t);
    let horizon_min = (-2.0 * max_eigenvalue(&params.p) / (min_eigenvalue(&params.qstar) * b) * a.ln()).max(1.0 / (l * b));
    let m_min = (growth * params.delta / (a * e) + 1.0).max(1.0 - 1.0 / b + 1.0 / (a * b));
    Ok([
        ConditionRecord::new("disturbance", disturbance, (1.0 - a) * e),
        ConditionRecord::new("horizon", horizon_min, t),
        ConditionRecord::new("contraction", m_min, params.big_m),
    ])
}

/// Largest disturbance bound for which the disturbance-size condition holds.
pub fn max_disturbance(params: &DesignParams) -> Result<f64> {
    params.validate()?;
    params.require_precondition()?;
    let l = params.lipschitz;
    let denom = params.gain()
        * params.tail_growth()
        * sqrt_max_eigenvalue(&params.p)
        * interval_integral(l, params.beta * params.horizon);
    Ok((1.0 - params.alpha) * params.epsilon / denom)
}

/// `sup ‖x̃(s;t_{k+1}) − x̂*(s;t_k)‖_P ≤ (L²βT/(LβT−1))·e^{L(1−β)T}·δ`.
pub fn error_sup_bound(params: &DesignParams) -> Result<f64> {
    params.validate()?;
    params.require_precondition()?;
    Ok(params.gain() * params.tail_growth() * params.delta)
}

/// Left-hand side of the stability inequality (independent of `n`).
pub fn stability_lhs(params: &DesignParams) -> f64 {
    let (l, b, t, d) = (params.lipschitz, params.beta, params.horizon, params.delta);
    let lbt1 = params.lbt() - 1.0;
    let eg = params.tail_growth();
    let ratio = max_eigenvalue(&params.q) / min_eigenvalue(&params.p);
    let first = ratio * (l * l * (1.0 - b) * t / lbt1) * eg * d
        * (params.gain() * eg * d + 2.0 * ((1.0 - b) * params.big_m + b) * params.alpha * params.epsilon);
    let second = l.powi(4) * b * t / (lbt1 * lbt1) * eg * eg * d * d;
    first + second
}

/// Right-hand side of the stability inequality at `n` (use `f64::INFINITY`
/// for the limit).
pub fn stability_rhs(params: &DesignParams, n: f64) -> f64 {
    let frac = if n.is_infinite() { 1.0 } else { n / (n + 1.0) };
    let gap = params.alpha * params.epsilon - params.gain() * params.delta;
    min_eigenvalue(&params.q) / max_eigenvalue(&params.p) * frac * gap * gap
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityCheck {
    /// Smallest `n ≤ n_max` satisfying the inequality.
    pub n_min: Option<u64>,
    /// Record evaluated at `n_max`.
    pub record: ConditionRecord,
    /// `rhs(∞) − lhs`.
    pub asymptotic_margin: f64,
    /// The right-hand side vanishes for every `n` (`αε ≤ gain·δ`).
    pub structural_failure: bool,
}

/// Searches the smallest admissible `n` in `1..=n_max`. The right-hand side
/// increases with `n`, so `n_max` is tested first and the rest is bisection.
pub fn check_stability(params: &DesignParams, n_max: u64) -> Result<StabilityCheck> {
    params.validate()?;
    params.require_precondition()?;
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be ≥ 1".into()));
    }
    let lhs = stability_lhs(params);
    let ae = params.alpha * params.epsilon;
    let structural = ae - params.gain() * params.delta <= 1e-12 * ae;
    let record = ConditionRecord::new("stability", lhs, stability_rhs(params, n_max as f64));
    let asymptotic_margin = stability_rhs(params, f64::INFINITY) - lhs;
    let n_min = if structural || !record.satisfied {
        None
    } else {
        let (mut lo, mut hi) = (0u64, n_max);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if stability_rhs(params, mid as f64) >= lhs {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    };
    Ok(StabilityCheck {
        n_min,
        record: ConditionRecord {
            satisfied: n_min.is_some(),
            ..record
        },
        asymptotic_margin,
        structural_failure: structural,
    })
}

/// Level of the set the disturbed closed loop converges to.
pub fn ultimate_bound(params: &DesignParams) -> Result<f64> {
    params.validate()?;
    params.require_precondition()?;
    let (l, b, t, d) = (params.lipschitz, params.beta, params.horizon, params.delta);
    let lbt1 = params.lbt() - 1.0;
    let eg = params.tail_growth();
    let pq = max_eigenvalue(&params.p) / min_eigenvalue(&params.q);
    let qp = max_eigenvalue(&params.q) / min_eigenvalue(&params.p);
    let quad = (1.0 + pq * eg * eg) * l.powi(4) * b * t / (lbt1 * lbt1) * d * d;
    let lin = pq * qp * 4.0 * params.alpha * params.epsilon * l * l * (1.0 - b) * t / lbt1 * eg * d;
    Ok(quad + lin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma2Report {
    /// `sup ‖g(t)‖` over the samples.
    pub sup: f64,
    /// `½∫‖g′‖ + ½‖g(a) + g(b)‖`.
    pub bound: f64,
    pub holds: bool,
}

/// Checks `sup‖g‖ ≤ ½∫‖g′‖ + ½‖g(a)+g(b)‖` on a sampled function. The
/// derivative integral is the total variation of the piecewise-linear
/// interpolant. Norms are weighted by `weight` when given.
pub fn lemma2_check(values: &[DVector<f64>], weight: Option<&DMatrix<f64>>) -> Lemma2Report {
    let norm = |v: &DVector<f64>| match weight {
        Some(w) => weighted_norm(v, w),
        None => v.norm(),
    };
    if values.is_empty() {
        return Lemma2Report {
            sup: 0.0,
            bound: 0.0,
            holds: true,
        };
    }
    let sup = values.iter().map(norm).fold(0.0, f64::max);
    let variation: f64 = values.windows(2).map(|w| norm(&(&w[1] - &w[0]))).sum();
    let ends = norm(&(&values[0] + &values[values.len() - 1]));
    let bound = 0.5 * variation + 0.5 * ends;
    let scale = sup.max(bound);
    Lemma2Report {
        sup,
        bound,
        holds: sup <= bound + 1e-6 * (1.0 + scale),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateInputs {
    pub horizon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub big_m: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub lipschitz: f64,
    pub rho: f64,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub qstar: Vec<Vec<f64>>,
}

impl From<&DesignParams> for CertificateInputs {
    fn from(p: &DesignParams) -> Self {
        Self {
            horizon: p.horizon,
            alpha: p.alpha,
            beta: p.beta,
            big_m: p.big_m,
            delta: p.delta,
            epsilon: p.epsilon,
            lipschitz: p.lipschitz,
            rho: p.rho,
            p: to_rows(&p.p),
            q: to_rows(&p.q),
            r: to_rows(&p.r),
            k: to_rows(&p.k),
            qstar: to_rows(&p.qstar),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub schema_version: &'static str,
    pub passed: bool,
    /// Name of the first violated condition.
    pub first_failure: Option<String>,
    pub conditions: Vec<ConditionRecord>,
    pub rho_max: Option<f64>,
    pub eps_bar: Option<f64>,
    pub n_min: Option<u64>,
    pub beta_eff: Option<f64>,
    pub error_sup_bound: Option<f64>,
    /// Level the integral rule would use at the configured `β`.
    pub design_delta: Option<f64>,
    pub inputs: CertificateInputs,
}

/// Evaluates every condition. Invalid inputs are an error; unmet conditions
/// (including `LβT ≤ 1`) yield a failing certificate.
pub fn certify(params: &DesignParams, n_max: u64) -> Result<Certificate> {
    params.validate()?;
    let inputs = CertificateInputs::from(params);
    let pre = ConditionRecord::new("precondition_lbt", 1.0, params.lbt());
    let pre = ConditionRecord {
        satisfied: params.lbt() > 1.0,
        ..pre
    };
    let beta_eff = if params.rho == 0.0 {
        Some(1.0)
    } else if params.delta > 0.0 {
        Some(effective_beta(params.delta, params.rho, params.lipschitz, params.horizon, &params.p)?)
    } else {
        None
    };
    let design = design_delta(params.rho, params.lipschitz, params.beta, params.horizon, &params.p).ok();
    if !pre.satisfied {
        return Ok(Certificate {
            schema_version: SCHEMA_VERSION,
            passed: false,
            first_failure: Some(pre.name.clone()),
            conditions: vec![pre],
            rho_max: None,
            eps_bar: None,
            n_min: None,
            beta_eff,
            error_sup_bound: None,
            design_delta: design,
            inputs,
        });
    }
    let mut conditions = vec![pre];
    conditions.extend(check_feasibility(params)?);
    let stability = check_stability(params, n_max)?;
    conditions.push(stability.record.clone());
    let first_failure = conditions.iter().find(|c| !c.satisfied).map(|c| c.name.clone());
    Ok(Certificate {
        schema_version: SCHEMA_VERSION,
        passed: first_failure.is_none(),
        first_failure,
        conditions,
        rho_max: Some(max_disturbance(params)?),
        eps_bar: Some(ultimate_bound(params)?),
        n_min: stability.n_min,
        beta_eff,
        error_sup_bound: Some(error_sup_bound(params)?),
        design_delta: design,
        inputs,
    })
}
