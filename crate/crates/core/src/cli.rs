//! Batch front end: one experiment per invocation, driven by a TOML config.
//!
//! Every run writes into its output directory only:
//!
//! * `manifest.json` with the resolved config, seeds and crate version. Passing
//!   it back through `--config` reproduces the run.
//! * `trajectory.csv` (`iteration,eta_inverse,<parameters>`) and
//!   `record.json` for the optimizers, plus `summary.json`.
//! * `delta_<family>.csv` (`n,delta_mean,delta_stderr`) and `fit_<family>.json`
//!   for glass analysis.
//! * `psd.csv` (`omega,s_value`) and `noise_check.json` for the noise check.
//!
//! Exit status is 0 on success, 2 for configuration errors and 3 for numerical
//! failures such as a blind protocol or a degenerate Fisher estimate.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{ConfigError, Experiment, FieldKind, GlassFamily, RunConfig};
use crate::drive::{optimize_continuous, ContinuousDriveEngine, ContinuousProtocol};
use crate::error::Error;
use crate::field::{MultiToneField, PhotocurrentField, Waveform};
use crate::glass::{ensemble_delta, fit_ensemble, ProtocolTrajectory, SpinKind};
use crate::noise::{NoisePool, NoiseSynthesizer, NoiseTrace};
use crate::optimizer::{RunRecord, SgdFailure, SgdSettings};
use crate::pulses::{decoherence_chi, optimize_pi, PiPulseProtocol};
use crate::pump::{optimize_pump, probe_flips, pump_sensitivity, ProbeMode};
use crate::MICROSECOND;

/// Worker-thread count when `--threads` is absent.
pub const THREADS_ENV: &str = "QSENSE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "qsense", version, about = "Optimal-control sensing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize π-pulse timings.
    OptimizePi(RunArgs),
    /// Optimize a continuous drive against a noise pool.
    OptimizeContinuous(RunArgs),
    /// Optimize pump switch times of a pump-probe experiment.
    OptimizePump(RunArgs),
    /// Two-time autocorrelation and growth fit over an ensemble of runs.
    GlassAnalyze(RunArgs),
    /// Sample the noise spectrum and compare synthesized traces against it.
    NoiseCheck(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `opt.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (Experiment, &RunArgs) {
        match self {
            Self::OptimizePi(a) => (Experiment::OptimizePi, a),
            Self::OptimizeContinuous(a) => (Experiment::OptimizeContinuous, a),
            Self::OptimizePump(a) => (Experiment::OptimizePump, a),
            Self::GlassAnalyze(a) => (Experiment::GlassAnalyze, a),
            Self::NoiseCheck(a) => (Experiment::NoiseCheck, a),
        }
    }
}

/// Anything that ends a run early.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Numerical(String),
    Other(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Numerical(_) => EXIT_NUMERICAL,
            Self::Other(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(e) => write!(f, "config error: {e}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
            Self::Other(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            e if e.is_numerical() => Self::Numerical(e.to_string()),
            Error::InvalidParameter { .. } | Error::Mismatch { .. } => Self::Config(ConfigError::from_error(&e)),
            e => Self::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        Self::Other(e.to_string())
    }
}

/// Parse arguments, run, print any error and return the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(out) => {
            log::info!("results written to {}", out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("qsense: {e}");
            e.exit_code()
        }
    }
}

/// Execute one subcommand; returns the output directory.
pub fn run(command: &Command) -> Result<PathBuf, RunError> {
    let (experiment, args) = command.parts();
    let mut config = RunConfig::load(&args.config)?;
    match config.experiment {
        Some(e) if e != experiment => {
            return Err(ConfigError::new(
                "experiment",
                format!("config is for {} but the subcommand runs {}", e.name(), experiment.name()),
            )
            .into())
        }
        _ => config.experiment = Some(experiment),
    }
    if let Some(seed) = args.seed {
        config.opt.seed = seed;
    }
    config.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(experiment.name()));
    let threads = args.threads.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    let pool = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| RunError::Other(e.to_string()))?;
    pool.install(|| execute(&config, &out))?;
    Ok(out)
}

/// Run a validated config into `out`, writing the manifest first.
pub fn execute(config: &RunConfig, out: &Path) -> Result<(), RunError> {
    let experiment = config.experiment()?;
    fs::create_dir_all(out)?;
    let resolved = config.resolved();
    let outputs: Vec<String> = match experiment {
        Experiment::OptimizePi | Experiment::OptimizeContinuous | Experiment::OptimizePump => {
            vec!["trajectory.csv".into(), "record.json".into(), "summary.json".into()]
        }
        Experiment::GlassAnalyze => resolved
            .glass
            .iter()
            .flat_map(|g| &g.families)
            .flat_map(|f| [format!("delta_{}.csv", f.name()), format!("fit_{}.json", f.name())])
            .collect(),
        Experiment::NoiseCheck => vec!["psd.csv".into(), "noise_check.json".into()],
    };
    let mut manifest_config = resolved.clone();
    manifest_config.out = Some(out.to_path_buf());
    let manifest = json!({
        "crate": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": experiment.name(),
        "seeds": {
            "opt": resolved.opt.seed,
            "noise": resolved.protocol.as_ref().and_then(|p| p.noise_seed),
        },
        "outputs": outputs,
        "config": manifest_config,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    match experiment {
        Experiment::OptimizePi => run_pi(&resolved, out),
        Experiment::OptimizeContinuous => run_continuous(&resolved, out),
        Experiment::OptimizePump => run_pump(&resolved, out),
        Experiment::GlassAnalyze => run_glass(&resolved, out),
        Experiment::NoiseCheck => run_noise_check(&resolved, out),
    }
}

/// Either target waveform, chosen by `field.type`.
#[derive(Debug, Clone)]
pub enum TargetField {
    MultiTone(MultiToneField),
    Photocurrent(PhotocurrentField),
}

impl Waveform for TargetField {
    fn value(&self, t: f64) -> f64 {
        match self {
            Self::MultiTone(f) => f.value(t),
            Self::Photocurrent(f) => f.value(t),
        }
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Self::MultiTone(f) => f.integral(a, b),
            Self::Photocurrent(f) => f.integral(a, b),
        }
    }
}

fn target_field(config: &RunConfig) -> Result<TargetField, RunError> {
    Ok(match config.field.kind {
        FieldKind::Multitone => TargetField::MultiTone(config.multitone_field()?),
        FieldKind::Photocurrent => TargetField::Photocurrent(config.pump_config()?.field()?),
    })
}

fn write_compact(path: &Path, value: &impl serde::Serialize) -> Result<(), RunError> {
    let mut text = serde_json::to_string(value).map_err(|e| RunError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `iteration,eta_inverse,<parameters>` with rows padded to the widest snapshot.
fn trajectory_csv(record: &RunRecord, header: impl Fn(usize) -> String) -> String {
    let width = record.snapshots.iter().map(|s| s.theta.len()).max().unwrap_or(0);
    let mut csv = String::from("iteration,eta_inverse");
    for i in 0..width {
        csv.push(',');
        csv.push_str(&header(i));
    }
    csv.push('\n');
    for s in &record.snapshots {
        let _ = write!(csv, "{},{}", s.iteration, s.eta_inverse);
        for i in 0..width {
            csv.push(',');
            if let Some(v) = s.theta.get(i) {
                let _ = write!(csv, "{v}");
            }
        }
        csv.push('\n');
    }
    csv
}

/// Persist the trajectory and record of a run, successful or not.
fn save_run(
    out: &Path,
    result: Result<RunRecord, SgdFailure>,
    header: impl Fn(usize) -> String,
) -> Result<RunRecord, RunError> {
    let (record, failure) = match result {
        Ok(r) => (r, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    fs::write(out.join("trajectory.csv"), trajectory_csv(&record, header))?;
    write_compact(&out.join("record.json"), &record)?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(record),
    }
}

fn run_summary(record: &RunRecord) -> serde_json::Value {
    let last = record.last();
    json!({
        "iterations": record.settings.iterations,
        "initial_eta_inverse": record.initial_eta_inverse(),
        "best_eta_inverse": record.best_eta_inverse(),
        "best_iteration": record.best_iteration,
        "final_eta_inverse": last.map(|s| s.eta_inverse),
        "final_parameters": last.map(|s| s.theta.len()),
    })
}

fn pi_run(config: &RunConfig, settings: &SgdSettings) -> Result<Result<RunRecord, SgdFailure>, RunError> {
    let field = target_field(config)?;
    Ok(optimize_pi(field, &config.psd()?, config.sensing_time(), config.n_pulses(), settings))
}

fn run_pi(config: &RunConfig, out: &Path) -> Result<(), RunError> {
    let record = save_run(out, pi_run(config, &config.opt.settings())?, |i| format!("t_{}", i + 1))?;
    write_json(&out.join("summary.json"), &run_summary(&record))?;
    Ok(())
}

fn noise_pool(config: &RunConfig) -> Result<Arc<NoisePool>, RunError> {
    let s = config.continuous();
    let pool = NoisePool::build(&config.psd()?, config.sensing_time(), s.dt, s.pool_size, s.minibatch, s.noise_seed)?;
    Ok(Arc::new(pool))
}

fn continuous_run(
    config: &RunConfig,
    pool: Arc<NoisePool>,
    settings: &SgdSettings,
) -> Result<Result<RunRecord, SgdFailure>, RunError> {
    let field = target_field(config)?;
    let s = config.continuous();
    Ok(optimize_continuous(field, pool, config.sensing_time(), s.init_range, config.amplitude(), settings))
}

fn run_continuous(config: &RunConfig, out: &Path) -> Result<(), RunError> {
    let pool = noise_pool(config)?;
    let result = continuous_run(config, pool.clone(), &config.opt.settings())?;
    let header = |i: usize| format!("phi_{}_{}", if i % 2 == 0 { 'x' } else { 'y' }, i / 2);
    let record = save_run(out, result, header)?;

    // the best minibatch snapshot, re-scored on the whole pool
    let engine = ContinuousDriveEngine::new(target_field(config)?, config.sensing_time(), pool.dt())?;
    let all: Vec<&NoiseTrace> = pool.traces().iter().collect();
    let best = record
        .snapshots
        .iter()
        .max_by(|a, b| a.eta_inverse.total_cmp(&b.eta_inverse))
        .ok_or_else(|| RunError::Other("run recorded no snapshots".into()))?;
    let protocol = ContinuousProtocol::from_interleaved(&best.theta, pool.dt())?;
    let pool_eta = engine.sensitivity(&protocol, config.amplitude(), &all)?;
    let mut summary = run_summary(&record);
    summary["converged_iteration"] = json!(best.iteration);
    summary["converged_eta_inverse"] = json!(1.0 / pool_eta);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn pump_run(config: &RunConfig, settings: &SgdSettings) -> Result<Result<RunRecord, SgdFailure>, RunError> {
    let pump = config.pump_config()?;
    Ok(optimize_pump(&pump, &config.psd()?, settings, config.pump_joint()))
}

fn run_pump(config: &RunConfig, out: &Path) -> Result<(), RunError> {
    let pump = config.pump_config()?;
    let n_switch = pump.pump_switches.len();
    let header = move |i: usize| if i < n_switch { format!("s_{}", i + 1) } else { format!("p_{}", i + 1 - n_switch) };
    let record = save_run(out, pump_run(config, &config.opt.settings())?, header)?;

    // the same pump scored with an evenly spaced probe, for reference
    let psd = config.psd()?;
    let mut cp = pump.clone();
    let tau = config.pump.tau_us.unwrap_or(crate::pump::DEFAULT_TAU / MICROSECOND) * MICROSECOND;
    cp.probe_flips = probe_flips(ProbeMode::Cp, pump.probe_flips.len(), tau);
    let cp_eta = cp.validate().and_then(|_| pump_sensitivity(&cp, &psd)).ok();
    let mut summary = run_summary(&record);
    summary["improvement"] = json!(record.best_eta_inverse() / record.initial_eta_inverse());
    summary["cp_probe_eta_inverse"] = json!(cp_eta.map(|e| 1.0 / e));
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn spin_kind(family: GlassFamily) -> SpinKind {
    match family {
        GlassFamily::PiPulses => SpinKind::PiGaps,
        GlassFamily::Continuous => SpinKind::ContinuousPhases,
        GlassFamily::Pump => SpinKind::PumpTimings,
    }
}

fn read_record(path: &Path) -> Result<RunRecord, RunError> {
    let text = fs::read_to_string(path).map_err(|e| {
        RunError::Config(ConfigError::new("glass.records", format!("{}: {e}", path.display())))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| RunError::Config(ConfigError::new("glass.records", format!("{}: {e}", path.display()))))
}

/// Records named in the config, or a fresh ensemble seeded `opt.seed + r`
/// whose records are kept under `runs/<family>/`.
fn glass_records(config: &RunConfig, family: GlassFamily, out: &Path) -> Result<Vec<RunRecord>, RunError> {
    let glass = config.glass.as_ref().ok_or_else(|| ConfigError::new("glass", "missing [glass] section"))?;
    if !glass.records.is_empty() {
        return glass.records.iter().map(|p| read_record(p)).collect();
    }
    let runs = glass.runs.unwrap_or(0);
    let dir = out.join("runs").join(family.name());
    fs::create_dir_all(&dir)?;
    let pool = match family {
        GlassFamily::Continuous => Some(noise_pool(config)?),
        _ => None,
    };
    let mut records = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut settings = config.opt.settings();
        settings.seed = config.opt.seed.wrapping_add(r as u64);
        let result = match &pool {
            None if family == GlassFamily::PiPulses => pi_run(config, &settings)?,
            None => pump_run(config, &settings)?,
            Some(pool) => continuous_run(config, pool.clone(), &settings)?,
        };
        let record = result.map_err(|f| RunError::from(f.error))?;
        log::info!("{} run {r}: best eta^-1 {}", family.name(), record.best_eta_inverse());
        write_compact(&dir.join(format!("run_{r:03}.json")), &record.parameters_only())?;
        records.push(record);
    }
    Ok(records)
}

fn run_glass(config: &RunConfig, out: &Path) -> Result<(), RunError> {
    let glass = config.glass.clone().ok_or_else(|| ConfigError::new("glass", "missing [glass] section"))?;
    for &family in &glass.families {
        let records = glass_records(config, family, out)?;
        let kind = spin_kind(family);
        let trajectories: Vec<ProtocolTrajectory> =
            records.iter().map(|r| ProtocolTrajectory::from_record(r, kind).truncated()).collect();
        let points = ensemble_delta(&trajectories, glass.n_w)?;
        let mut csv = String::from("n,delta_mean,delta_stderr\n");
        for p in &points {
            let _ = writeln!(csv, "{},{},{}", p.n, p.mean, p.stderr);
        }
        fs::write(out.join(format!("delta_{}.csv", family.name())), csv)?;
        let fit = fit_ensemble(&points)?;
        let mut report = fit.report();
        report["points_used"] = json!(fit.points_used);
        report["nonpositive_excluded"] = json!(fit.nonpositive_excluded);
        report["plateau_from"] = json!(fit.plateau_from);
        report["power_law_prefactor"] = json!(fit.power_law.prefactor);
        report["log_intercept"] = json!(fit.logarithmic.intercept);
        report["n_w"] = json!(glass.n_w);
        report["runs"] = json!(records.len());
        write_json(&out.join(format!("fit_{}.json", family.name())), &report)?;
    }
    Ok(())
}

fn run_noise_check(config: &RunConfig, out: &Path) -> Result<(), RunError> {
    let check = config.noise_check.clone().unwrap_or_default();
    let psd = config.psd()?;
    let t = config.sensing_time();
    let dt = check.dt_ns * crate::NANOSECOND;

    let top = psd.reach();
    let mut csv = String::from("omega,s_value\n");
    for i in 0..check.psd_samples {
        let w = top * i as f64 / (check.psd_samples - 1) as f64;
        let _ = writeln!(csv, "{w},{}", psd.evaluate(w));
    }
    fs::write(out.join("psd.csv"), csv)?;

    let synth = NoiseSynthesizer::new(&psd, t, dt)?;
    let grid = *synth.grid();
    let lattice_variance: f64 = (0..grid.n_freq)
        .map(|j| if j == 0 { 0.5 } else { 1.0 } * psd.evaluate(grid.omega(j)) * grid.d_omega / std::f64::consts::PI)
        .sum();
    let band_limit = grid.omega(grid.n_freq - 1) + 0.5 * grid.d_omega;

    // Monte-Carlo coherence e^{-χ} of a few filters against the quadrature χ
    let protocols = [0usize, 4, 16]
        .iter()
        .map(|&n| PiPulseProtocol::carr_purcell(n, t))
        .collect::<crate::Result<Vec<_>>>()?;
    let pool = NoisePool::build(&psd, t, dt, check.traces, 1, config.opt.seed)?;
    let samples = pool.traces()[0].len();
    let variance = pool.traces().iter().flat_map(|tr| tr.samples.iter()).map(|x| x * x).sum::<f64>()
        / (pool.len() * samples) as f64;
    let filters: Vec<serde_json::Value> = protocols
        .iter()
        .map(|p| {
            let y: Vec<f64> = (0..samples)
                .map(|k| crate::pulses::switching_function(p, (k as f64 + 0.5) * dt))
                .collect();
            let coherence = pool
                .traces()
                .iter()
                .map(|tr| tr.samples.iter().zip(&y).map(|(x, s)| x * s).sum::<f64>() * dt)
                .map(f64::cos)
                .sum::<f64>()
                / pool.len() as f64;
            json!({
                "pulses": p.len(),
                "chi_quadrature": decoherence_chi(p, &psd),
                "chi_sampled": -coherence.ln(),
            })
        })
        .collect();
    let report = json!({
        "traces": pool.len(),
        "dt": dt,
        "band_limit": band_limit,
        "variance_sampled": variance,
        "variance_lattice": lattice_variance,
        "variance_band": psd.band_power(band_limit),
        "filters": filters,
    });
    write_json(&out.join("noise_check.json"), &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_rows_are_padded() {
        let mut record = RunRecord::empty(SgdSettings::default());
        for (i, theta) in [vec![1.0, 2.5], vec![0.125]].into_iter().enumerate() {
            record.snapshots.push(crate::optimizer::Snapshot {
                iteration: i,
                loss: 1.0,
                eta_inverse: 0.1,
                theta,
                minibatch: vec![],
                update: vec![],
                kept: vec![],
            });
        }
        let csv = trajectory_csv(&record, |i| format!("t_{}", i + 1));
        assert_eq!(csv, "iteration,eta_inverse,t_1,t_2\n0,0.1,1,2.5\n1,0.1,0.125,\n");
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(RunError::from(Error::BlindProtocol).exit_code(), EXIT_NUMERICAL);
        assert_eq!(RunError::from(Error::invalid("opt.momentum", "bad")).exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn bad_flag_is_a_usage_error() {
        assert_eq!(main_with_args(["qsense", "optimize-pi", "--bogus"]), EXIT_CONFIG);
    }
}
