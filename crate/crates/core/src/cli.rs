//! Command-line driver: `certify`, `simulate`, `compare` and `montecarlo`.
//!
//! Exit codes: 0 success, 1 usage/config/IO error, 2 certificate failure,
//! 3 recursive-feasibility loss or runtime property violation.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::certify::{certify, Certificate, DEFAULT_N_MAX};
use crate::config::{resolve, Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::to_rows;
use crate::sim::{
    metrics, run_closed_loop, run_monte_carlo, EventRecord, Metrics, MonteCarloReport, RunBounds, RunStatus, SimTrace,
    Violation, WindowRecord, TRACE_SCHEMA_VERSION,
};
use crate::synthesis::{care_residual, lqr, lyapunov_residual, terminal_level, TerminalLevel};
use crate::trigger::TriggerKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CERTIFICATE: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

pub const REPORT_SCHEMA_VERSION: &str = "etmpc-report/1";

#[derive(Debug, Parser)]
#[command(name = "etmpc", version, about = "Integral-type event-triggered nonlinear MPC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize missing design values and check every certificate condition.
    Certify(CommonArgs),
    /// Run one closed loop and write its trace, events and metrics.
    Simulate(SimulateArgs),
    /// Run the integral and pointwise rules on the same disturbance.
    Compare(SimulateArgs),
    /// Run matched trial pairs of both rules.
    Montecarlo(MonteCarloArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "SECS")]
    pub duration: Option<f64>,
    /// Run even when the certificate fails.
    #[arg(long)]
    pub exploratory: bool,
    /// Trace CSV path.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Events/metrics JSON path.
    #[arg(long, value_name = "PATH")]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub trials: Option<usize>,
    #[arg(long, value_name = "SECS")]
    pub duration: Option<f64>,
    #[arg(long)]
    pub exploratory: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Certify(a) => cmd_certify(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Montecarlo(a) => cmd_montecarlo(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

struct Overrides {
    out: Option<PathBuf>,
    seed: Option<u64>,
    duration: Option<f64>,
    trials: Option<usize>,
}

fn load(common: &CommonArgs, o: Overrides) -> Result<Resolved> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = common.out.as_ref().or(o.out.as_ref()) {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    if let Some(s) = o.seed {
        cfg.sim.seed = s;
    }
    if let Some(d) = o.duration {
        cfg.sim.duration = d;
    }
    if let Some(t) = o.trials {
        if t == 0 {
            return Err(Error::Config("--trials must be at least 1".into()));
        }
        cfg.sim.trials = t;
    }
    resolve(&cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Debug, Serialize)]
struct SynthesisReport {
    k: Vec<Vec<f64>>,
    /// Gain from the Riccati equation, for comparison with `k`.
    lqr_k: Option<Vec<Vec<f64>>>,
    care_residual: Option<f64>,
    kappa: Option<f64>,
    p: Vec<Vec<f64>>,
    /// Only available when `kappa` is known.
    lyapunov_residual: Option<f64>,
    epsilon: f64,
    level_search: Option<TerminalLevel>,
}

fn synthesis_report(res: &Resolved) -> SynthesisReport {
    let cfg = &res.sim;
    let d = &cfg.design;
    let (a, b) = cfg.model.linearize();
    let lq = lqr(&a, &b, &d.q, &d.r).ok();
    let kappa = res.effective.design.kappa;
    let lyap = kappa.map(|kp| {
        let n = a.nrows();
        let ak = &a + &b * &d.k + nalgebra::DMatrix::identity(n, n) * kp;
        lyapunov_residual(&ak, &d.qstar, &d.p)
    });
    SynthesisReport {
        k: to_rows(&d.k),
        lqr_k: lq.as_ref().map(|s| to_rows(&s.k)),
        care_residual: lq.as_ref().map(|s| care_residual(&a, &b, &d.q, &d.r, &s.s)),
        kappa,
        p: to_rows(&d.p),
        lyapunov_residual: lyap,
        epsilon: d.epsilon,
        level_search: terminal_level(&cfg.model, &d.k, &d.p, &d.qstar).ok(),
    }
}

#[derive(Serialize)]
struct CertifyBody<'a> {
    synthesis: SynthesisReport,
    certificate: &'a Certificate,
}

pub fn cmd_certify(args: &CommonArgs) -> Result<i32> {
    let res = load(args, Overrides { out: None, seed: None, duration: None, trials: None })?;
    let cert = certify(&res.sim.design, DEFAULT_N_MAX)?;
    let doc = res.envelope(
        crate::certify::SCHEMA_VERSION,
        CertifyBody {
            synthesis: synthesis_report(&res),
            certificate: &cert,
        },
    );
    let path = res.out_dir.join("certificate.json");
    write_json(&path, &doc)?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    for c in &cert.conditions {
        eprintln!(
            "{:<18} {}  lhs = {:.6e}  rhs = {:.6e}",
            c.name,
            if c.satisfied { "ok  " } else { "FAIL" },
            c.lhs,
            c.rhs
        );
    }
    eprintln!("certificate written to {}", path.display());
    Ok(if cert.passed { EXIT_OK } else { EXIT_CERTIFICATE })
}

/// Events, windows and metrics of one run.
#[derive(Debug, Serialize)]
pub struct RunReport<'a> {
    pub trigger: TriggerKind,
    pub seed: u64,
    pub certified: bool,
    pub status: RunStatus,
    pub bounds: &'a RunBounds,
    pub metrics: Metrics,
    pub events: &'a [EventRecord],
    pub windows: &'a [WindowRecord],
    pub violations: &'a [Violation],
}

impl<'a> RunReport<'a> {
    pub fn new(trace: &'a SimTrace) -> Self {
        Self {
            trigger: trace.trigger,
            seed: trace.seed,
            certified: trace.certified,
            status: trace.status,
            bounds: &trace.bounds,
            metrics: metrics(trace),
            events: &trace.events,
            windows: &trace.windows,
            violations: &trace.violations,
        }
    }
}

fn run_code(trace: &SimTrace) -> i32 {
    if trace.status != RunStatus::Completed || !trace.violations.is_empty() {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    }
}

/// Gate on the certificate; `Some(code)` means stop.
fn gate(res: &Resolved, exploratory: bool) -> Result<Option<i32>> {
    let cert = certify(&res.sim.design, DEFAULT_N_MAX)?;
    if cert.passed || exploratory {
        return Ok(None);
    }
    eprintln!(
        "certificate fails at '{}'; pass --exploratory to simulate anyway",
        cert.first_failure.unwrap_or_default()
    );
    Ok(Some(EXIT_CERTIFICATE))
}

fn report_trace(trace: &SimTrace) {
    let m = metrics(trace);
    eprintln!(
        "{}: status {:?}, {} events, min interval {}, {} violations",
        trace.trigger,
        trace.status,
        m.event_count,
        m.min_interval.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        m.violations
    );
    for v in &trace.violations {
        eprintln!("  {:?} at t = {:.4}: {}", v.kind, v.time, v.detail);
    }
}

/// Writes `(t, value)` files for every trace series into `dir`, prefixed by
/// `prefix`.
pub fn write_plot_data(trace: &SimTrace, dir: &Path, prefix: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = trace.states.first().map_or(0, |s| s.len());
    let m = trace.inputs.first().map_or(0, |u| u.len());
    let series = |name: &str, f: &dyn Fn(usize) -> f64| -> Result<()> {
        let mut w = create(&dir.join(format!("{prefix}{name}.dat")))?;
        writeln!(w, "# t {name}")?;
        for (i, t) in trace.times.iter().enumerate() {
            writeln!(w, "{t} {}", f(i))?;
        }
        w.flush()?;
        Ok(())
    };
    for j in 0..n {
        series(&format!("x{}", j + 1), &|i| trace.states[i][j])?;
        series(&format!("w{}", j + 1), &|i| trace.disturbances[i][j])?;
    }
    for j in 0..m {
        series(&format!("u{}", j + 1), &|i| trace.inputs[i][j])?;
    }
    series("err_P", &|i| trace.err_p[i])?;
    series("accum", &|i| trace.accumulator[i])?;
    series("norm_P", &|i| trace.state_norm[i])?;
    let mut w = create(&dir.join(format!("{prefix}events.dat")))?;
    writeln!(w, "# t interval")?;
    for e in &trace.events {
        writeln!(w, "{} {}", e.time, e.interval.unwrap_or(f64::NAN))?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(trace: &SimTrace, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let res = load(
        &args.common,
        Overrides { out: None, seed: args.seed, duration: args.duration, trials: None },
    )?;
    if let Some(code) = gate(&res, args.exploratory)? {
        return Ok(code);
    }
    let mut cfg = res.sim.clone();
    cfg.exploratory = args.exploratory;
    let trace = run_closed_loop(&cfg)?;
    let trace_path = args.trace.clone().unwrap_or_else(|| res.out_dir.join("trace.csv"));
    let events_path = args.events.clone().unwrap_or_else(|| res.out_dir.join("events.json"));
    write_trace(&trace, &trace_path)?;
    write_json(&events_path, &res.envelope(TRACE_SCHEMA_VERSION, RunReport::new(&trace)))?;
    write_plot_data(&trace, &res.out_dir.join("plot"), "")?;
    report_trace(&trace);
    Ok(run_code(&trace))
}

#[derive(Serialize)]
struct CompareBody<'a> {
    integral: RunReport<'a>,
    pointwise: RunReport<'a>,
}

pub fn cmd_compare(args: &SimulateArgs) -> Result<i32> {
    let res = load(
        &args.common,
        Overrides { out: None, seed: args.seed, duration: args.duration, trials: None },
    )?;
    if let Some(code) = gate(&res, args.exploratory)? {
        return Ok(code);
    }
    let mut base = res.sim.clone();
    base.exploratory = args.exploratory;
    let integral = run_closed_loop(&base.with_trigger(TriggerKind::Integral))?;
    let pointwise = run_closed_loop(&base.with_trigger(TriggerKind::Pointwise))?;
    for (trace, name) in [(&integral, "integral"), (&pointwise, "pointwise")] {
        write_trace(trace, &res.out_dir.join(format!("trace_{name}.csv")))?;
        write_plot_data(trace, &res.out_dir.join("plot"), &format!("{name}_"))?;
        report_trace(trace);
    }
    let path = args.events.clone().unwrap_or_else(|| res.out_dir.join("compare.json"));
    write_json(
        &path,
        &res.envelope(
            REPORT_SCHEMA_VERSION,
            CompareBody {
                integral: RunReport::new(&integral),
                pointwise: RunReport::new(&pointwise),
            },
        ),
    )?;
    Ok(run_code(&integral).max(run_code(&pointwise)))
}

fn write_trials_csv(report: &MonteCarloReport, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(
        w,
        "trial,seed,integral_events,integral_mean_interval,integral_violations,integral_completed,\
         pointwise_events,pointwise_mean_interval,pointwise_violations,pointwise_completed"
    )?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for t in &report.trials {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            t.index,
            t.seed,
            t.integral.event_count,
            opt(t.integral.mean_interval),
            t.integral.violations,
            u8::from(t.integral.completed()),
            t.pointwise.event_count,
            opt(t.pointwise.mean_interval),
            t.pointwise.violations,
            u8::from(t.pointwise.completed()),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_montecarlo(args: &MonteCarloArgs) -> Result<i32> {
    let res = load(
        &args.common,
        Overrides { out: None, seed: args.seed, duration: args.duration, trials: args.trials },
    )?;
    if let Some(code) = gate(&res, args.exploratory)? {
        return Ok(code);
    }
    let mut cfg = res.sim.clone();
    cfg.exploratory = args.exploratory;
    let report = run_monte_carlo(&cfg, res.trials, cfg.seed)?;
    write_json(&res.out_dir.join("montecarlo.json"), &res.envelope(REPORT_SCHEMA_VERSION, &report))?;
    write_trials_csv(&report, &res.out_dir.join("trials.csv"))?;
    let plot = res.out_dir.join("plot");
    fs::create_dir_all(&plot)?;
    for name in ["integral", "pointwise"] {
        let mut w = create(&plot.join(format!("event_count_{name}.dat")))?;
        writeln!(w, "# trial events")?;
        for t in &report.trials {
            let s = if name == "integral" { &t.integral } else { &t.pointwise };
            writeln!(w, "{} {}", t.index, s.event_count)?;
        }
        w.flush()?;
    }
    eprintln!(
        "mean events: integral {:.3} ({} completed), pointwise {:.3} ({} completed)",
        report.integral.mean_event_count,
        report.integral.completed,
        report.pointwise.mean_event_count,
        report.pointwise.completed
    );
    let clean = report.trials.iter().all(|t| {
        [&t.integral, &t.pointwise]
            .iter()
            .all(|s| s.completed() && s.violations == 0 && s.all_optimal)
    });
    Ok(if clean { EXIT_OK } else { EXIT_VIOLATION })
}
