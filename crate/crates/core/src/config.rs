//! TOML run configuration and its resolution into a simulation setup.
//!
//! Every design value may be omitted; missing values are synthesized and
//! written back, so the effective configuration echoed into outputs is a
//! complete, loadable config document.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certify::{check_feasibility, check_stability, DesignParams, DEFAULT_N_MAX};
use crate::error::{Error, Result};
use crate::linalg::{from_row_major, is_symmetric, max_eigenvalue, min_eigenvalue, to_row_major};
use crate::model::{CartParams, DisturbanceGenerator, DisturbanceKind, Dynamics, SystemModel, Term};
use crate::ocp::OcpSettings;
use crate::sim::SimConfig;
use crate::synthesis::{choose_kappa, lqr_gain, solve_lyapunov, terminal_level};
use crate::trigger::{design_delta, TriggerKind};

pub const CONFIG_SCHEMA_VERSION: &str = "etmpc-config/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    CartDamperSpring,
    Terms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: ModelName,
    pub lipschitz: f64,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    #[serde(default = "default_trigger_kind")]
    pub kind: TriggerKind,
    /// Same value as `design.delta`; either may be given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

fn default_trigger_kind() -> TriggerKind {
    TriggerKind::Integral
}

impl Default for TriggerSection {
    fn default() -> Self {
        Self {
            kind: TriggerKind::Integral,
            delta: None,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DisturbanceKind>,
    /// Defaults to `model.rho`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    /// Hold interval of the random-hold kind; defaults to `sim.step`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub x0: Vec<f64>,
    pub duration: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_step() -> f64 {
    0.01
}

fn default_trials() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".to_string()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub weights: WeightsSection,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub ocp: OcpSettings,
    #[serde(default)]
    pub trigger: TriggerSection,
    #[serde(default)]
    pub disturbance: DisturbanceSection,
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// A configuration with every value fixed, ready to simulate.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub sim: SimConfig,
    pub trials: usize,
    pub out_dir: PathBuf,
    /// The input document with synthesized values filled in.
    pub effective: RunConfig,
    /// Keys whose values were synthesized.
    pub synthesized: Vec<String>,
}

/// Output wrapper embedding the effective configuration.
#[derive(Debug, Clone, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema_version: &'static str,
    pub config_schema_version: &'static str,
    pub effective_config: &'a RunConfig,
    pub synthesized: &'a [String],
    #[serde(flatten)]
    pub body: T,
}

impl Resolved {
    pub fn envelope<T: Serialize>(&self, schema_version: &'static str, body: T) -> Envelope<'_, T> {
        Envelope {
            schema_version,
            config_schema_version: CONFIG_SCHEMA_VERSION,
            effective_config: &self.effective,
            synthesized: &self.synthesized,
            body,
        }
    }
}

fn matrix(name: &str, data: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    from_row_major(rows, cols, data).ok_or_else(|| {
        Error::Config(format!(
            "{name} needs {} entries ({rows}×{cols} row-major), got {}",
            rows * cols,
            data.len()
        ))
    })
}

fn require_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !is_symmetric(m, 1e-9) {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    if min_eigenvalue(m) <= 0.0 {
        return Err(Error::Config(format!("{name} must be positive definite")));
    }
    Ok(())
}

fn build_model(sec: &ModelSection) -> Result<SystemModel> {
    match sec.name {
        ModelName::CartDamperSpring => {
            let lower = sec.input_lower.clone().unwrap_or_else(|| vec![-1.0]);
            let upper = sec.input_upper.clone().unwrap_or_else(|| vec![1.0]);
            SystemModel::new(
                Dynamics::CartDamperSpring(CartParams::default()),
                2,
                1,
                DVector::from_vec(lower),
                DVector::from_vec(upper),
                sec.lipschitz,
                sec.rho,
            )
        }
        ModelName::Terms => {
            let n = sec
                .state_dim
                .ok_or_else(|| Error::Config("model.state_dim is required for term models".into()))?;
            let m = sec
                .input_dim
                .ok_or_else(|| Error::Config("model.input_dim is required for term models".into()))?;
            let lower = sec
                .input_lower
                .clone()
                .ok_or_else(|| Error::Config("model.input_lower is required for term models".into()))?;
            let upper = sec
                .input_upper
                .clone()
                .ok_or_else(|| Error::Config("model.input_upper is required for term models".into()))?;
            SystemModel::new(
                Dynamics::Terms(sec.terms.clone()),
                n,
                m,
                DVector::from_vec(lower),
                DVector::from_vec(upper),
                sec.lipschitz,
                sec.rho,
            )
        }
    }
    .map_err(|e| Error::Config(format!("model: {e}")))
}

/// Smallest multiple of `unit` that is at least `value`.
fn round_up(value: f64, unit: f64) -> f64 {
    let k = (value / unit - 1e-9).ceil().max(1.0);
    k * unit
}

/// Fills in missing values and builds the simulation setup.
pub fn resolve(cfg: &RunConfig) -> Result<Resolved> {
    let mut eff = cfg.clone();
    let mut synthesized = Vec::new();
    let model = build_model(&cfg.model)?;
    let (n, m) = (model.state_dim(), model.input_dim());
    eff.model.state_dim = Some(n);
    eff.model.input_dim = Some(m);
    eff.model.input_lower = Some(model.input_lower().iter().copied().collect());
    eff.model.input_upper = Some(model.input_upper().iter().copied().collect());

    let q = matrix("weights.Q", &cfg.weights.q, n, n)?;
    let r = matrix("weights.R", &cfg.weights.r, m, m)?;
    require_spd("weights.Q", &q)?;
    require_spd("weights.R", &r)?;

    let d = &cfg.design;
    let (a, b) = model.linearize();
    let k = match &d.k {
        Some(v) => matrix("design.K", v, m, n)?,
        None => {
            synthesized.push("design.K".to_string());
            lqr_gain(&a, &b, &q, &r)?
        }
    };
    let qstar = &q + k.transpose() * &r * &k;
    let p = match &d.p {
        Some(v) => {
            let p = matrix("design.P", v, n, n)?;
            require_spd("design.P", &p)?;
            p
        }
        None => {
            let kappa = match d.kappa {
                Some(kp) => kp,
                None => {
                    synthesized.push("design.kappa".to_string());
                    choose_kappa(&a, &b, &k)?
                }
            };
            eff.design.kappa = Some(kappa);
            synthesized.push("design.P".to_string());
            let ak = &a + &b * &k + DMatrix::identity(n, n) * kappa;
            solve_lyapunov(&ak, &qstar)?
        }
    };
    let epsilon = match d.epsilon {
        Some(e) => e,
        None => {
            synthesized.push("design.epsilon".to_string());
            terminal_level(&model, &k, &p, &qstar)?.epsilon
        }
    };
    let alpha = d.alpha.unwrap_or_else(|| {
        synthesized.push("design.alpha".to_string());
        0.8
    });
    let beta = d.beta.unwrap_or_else(|| {
        synthesized.push("design.beta".to_string());
        0.6
    });
    if !(alpha > 0.0 && alpha < 1.0) || !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!(
            "design.alpha must lie in (0,1) and design.beta in (0,1], got {alpha}, {beta}"
        )));
    }
    let l = model.lipschitz();
    let step = cfg.sim.step;
    if !(step > 0.0) {
        return Err(Error::Config(format!("sim.step must be positive, got {step}")));
    }
    let horizon = match d.horizon {
        Some(t) => t,
        None => {
            synthesized.push("design.T".to_string());
            let unit = cfg.ocp.grid as f64 * step;
            let needed = (-2.0 * max_eigenvalue(&p) / (min_eigenvalue(&qstar) * beta) * alpha.ln()).max(1.0 / (l * beta));
            let mut t = round_up(needed, unit);
            while l * beta * t <= 1.0 {
                t += unit;
            }
            t
        }
    };
    let delta = match (d.delta, cfg.trigger.delta) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Config(format!(
                "design.delta = {a} and trigger.delta = {b} disagree"
            )))
        }
        (Some(v), _) | (None, Some(v)) => v,
        (None, None) => {
            synthesized.push("design.delta".to_string());
            let mut params = DesignParams {
                horizon,
                alpha,
                beta,
                big_m: 1.0,
                delta: design_delta(model.disturbance_bound(), l, beta, horizon, &p)?,
                epsilon,
                lipschitz: l,
                rho: model.disturbance_bound(),
                p: p.clone(),
                q: q.clone(),
                r: r.clone(),
                k: k.clone(),
                qstar: qstar.clone(),
            };
            params.big_m = contraction_floor(&params);
            let mut tries = 0;
            while params.delta > 0.0
                && l * beta * horizon > 1.0
                && check_stability(&params, DEFAULT_N_MAX).map(|s| s.n_min.is_none()).unwrap_or(false)
                && tries < 60
            {
                params.delta *= 0.5;
                params.big_m = contraction_floor(&params);
                tries += 1;
            }
            params.delta
        }
    };
    let big_m = match d.big_m {
        Some(v) => v,
        None => {
            synthesized.push("design.M".to_string());
            let probe = DesignParams {
                horizon,
                alpha,
                beta,
                big_m: 1.0,
                delta,
                epsilon,
                lipschitz: l,
                rho: model.disturbance_bound(),
                p: p.clone(),
                q: q.clone(),
                r: r.clone(),
                k: k.clone(),
                qstar: qstar.clone(),
            };
            contraction_floor(&probe).ceil()
        }
    };
    let design = DesignParams {
        horizon,
        alpha,
        beta,
        big_m,
        delta,
        epsilon,
        lipschitz: l,
        rho: model.disturbance_bound(),
        p,
        q,
        r,
        k,
        qstar,
    };
    design.validate().map_err(|e| Error::Config(format!("design: {e}")))?;
    eff.design = DesignSection {
        horizon: Some(horizon),
        alpha: Some(alpha),
        beta: Some(beta),
        big_m: Some(big_m),
        delta: Some(delta),
        epsilon: Some(epsilon),
        p: Some(to_row_major(&design.p)),
        k: Some(to_row_major(&design.k)),
        kappa: eff.design.kappa,
    };
    eff.trigger.delta = Some(delta);

    let dist = &cfg.disturbance;
    let kind = dist.kind.unwrap_or(if model.disturbance_bound() > 0.0 {
        DisturbanceKind::PiecewiseRandomHold
    } else {
        DisturbanceKind::Zero
    });
    let magnitude = dist.magnitude.unwrap_or(model.disturbance_bound());
    let hold = dist.hold.unwrap_or(step);
    let mut gen = DisturbanceGenerator::new(kind, magnitude, hold, cfg.sim.seed)
        .map_err(|e| Error::Config(format!("disturbance: {e}")))?;
    if let Some(dir) = &dist.direction {
        if dir.len() != n {
            return Err(Error::Config(format!(
                "disturbance.direction needs {n} entries, got {}",
                dir.len()
            )));
        }
        gen = gen.with_direction(dir.clone()).map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(f) = dist.frequency {
        gen = gen.with_frequency(f).map_err(|e| Error::Config(e.to_string()))?;
    }
    eff.disturbance = DisturbanceSection {
        kind: Some(kind),
        magnitude: Some(magnitude),
        hold: Some(hold),
        direction: dist.direction.clone(),
        frequency: Some(gen.frequency()),
    };

    if cfg.sim.x0.len() != n {
        return Err(Error::Config(format!(
            "sim.x0 needs {n} entries, got {}",
            cfg.sim.x0.len()
        )));
    }
    let sim = SimConfig {
        model,
        design,
        ocp: cfg.ocp,
        trigger: cfg.trigger.kind,
        sigma: cfg.trigger.sigma,
        disturbance: gen,
        x0: DVector::from_vec(cfg.sim.x0.clone()),
        duration: cfg.sim.duration,
        step,
        seed: cfg.sim.seed,
        exploratory: false,
    };
    sim.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(Resolved {
        sim,
        trials: cfg.sim.trials,
        out_dir: PathBuf::from(&cfg.output.dir),
        effective: eff,
        synthesized,
    })
}

/// Smallest `M` meeting the contraction-rate condition.
fn contraction_floor(p: &DesignParams) -> f64 {
    check_feasibility(p).map(|c| c[2].lhs).unwrap_or(1.0).max(1.0)
}
