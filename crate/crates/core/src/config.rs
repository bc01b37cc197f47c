//! TOML run configuration.
//!
//! Every table rejects unknown keys. Values are read in lab units (μs, ns,
//! kHz, mG) and converted to SI by the accessors on [`RunConfig`]. Errors carry the
//! dotted key and, when the key appears in the source text, its line.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drive::{DEFAULT_B, DEFAULT_DT, DEFAULT_INIT_RANGE};
use crate::error::Error;
use crate::field::{MultiToneField, DEFAULT_B_MAX_MG, DEFAULT_TAU_RISE};
use crate::noise::{GaussianPeak, PowerSpectralDensity, DEFAULT_MINIBATCH, DEFAULT_POOL_SIZE};
use crate::optimizer::{SgdSettings, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::pump::{
    probe_flips, pump_train, ProbeMode, PumpProbeConfig, DEFAULT_PROBE_PULSES, DEFAULT_PUMP_PULSES, DEFAULT_SENSING_TIME,
    DEFAULT_T0, DEFAULT_TAU,
};
use crate::{MICROSECOND, NANOSECOND};

pub const DEFAULT_PI_PULSES: usize = 50;
pub const DEFAULT_SENSING_TIME_US: f64 = 50.0;
pub const DEFAULT_NOISE_SEED: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    OptimizePi,
    OptimizeContinuous,
    OptimizePump,
    GlassAnalyze,
    NoiseCheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::OptimizePi => "optimize_pi",
            Self::OptimizeContinuous => "optimize_continuous",
            Self::OptimizePump => "optimize_pump",
            Self::GlassAnalyze => "glass_analyze",
            Self::NoiseCheck => "noise_check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    #[default]
    Multitone,
    Photocurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    #[serde(rename = "type", default)]
    pub kind: FieldKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiToneSection {
    pub weights: Vec<f64>,
    pub freqs_khz: Vec<f64>,
    pub phases: Vec<f64>,
}

impl Default for MultiToneSection {
    fn default() -> Self {
        Self { weights: vec![0.45, 0.43, 0.12], freqs_khz: vec![77.0, 96.0, 144.0], phases: vec![0.3; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PhotocurrentSection {
    pub bmax_mg: Option<f64>,
    pub tau_rise_us: Option<f64>,
    /// Initial pump switch times; overrides the evenly spaced train.
    pub switch_times_us: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsdSection {
    pub floor: f64,
    #[serde(default)]
    pub components: Vec<GaussianPeak>,
}

impl Default for PsdSection {
    fn default() -> Self {
        let bath = PowerSpectralDensity::nv_bath();
        Self { floor: bath.floor(), components: bath.peaks().to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    PiPulses,
    Continuous,
}

/// Protocol settings. `type` may be left out when the experiment implies it;
/// glass ensembles omit it so both families' keys can be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(rename = "type")]
    pub kind: Option<ProtocolKind>,
    pub n_pulses: Option<usize>,
    pub dt_ns: Option<f64>,
    pub init_range_rad: Option<f64>,
    pub minibatch: Option<usize>,
    pub pool_size: Option<usize>,
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptSection {
    pub iterations: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub record_stride: usize,
    pub seed: u64,
}

impl Default for OptSection {
    fn default() -> Self {
        let s = SgdSettings::default();
        Self {
            iterations: s.iterations,
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            record_stride: s.record_stride,
            seed: s.seed,
        }
    }
}

impl OptSection {
    pub fn settings(&self) -> SgdSettings {
        SgdSettings {
            iterations: self.iterations,
            momentum: self.momentum,
            epsilon: self.epsilon,
            record_stride: self.record_stride,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PumpSection {
    pub n_pulses: Option<usize>,
    pub tau_us: Option<f64>,
    /// Optimize the probe pulse times together with the pump.
    pub joint: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub mode: Option<ProbeMode>,
    pub n_pulses: Option<usize>,
    pub t0_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlassSection {
    /// Protocol families to analyse, each written to its own files.
    pub families: Vec<GlassFamily>,
    pub n_w: usize,
    /// Existing record files, relative to the config file. When empty each
    /// ensemble is generated from `runs` seeds starting at `opt.seed`.
    #[serde(default)]
    pub records: Vec<PathBuf>,
    #[serde(default)]
    pub runs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlassFamily {
    PiPulses,
    Continuous,
    Pump,
}

impl GlassFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::PiPulses => "pi_pulses",
            Self::Continuous => "continuous",
            Self::Pump => "pump",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseCheckSection {
    pub traces: usize,
    pub psd_samples: usize,
    pub dt_ns: f64,
}

impl Default for NoiseCheckSection {
    fn default() -> Self {
        Self { traces: 4000, psd_samples: 2000, dt_ns: DEFAULT_DT / NANOSECOND }
    }
}

/// A parsed run configuration. Missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    pub out: Option<PathBuf>,
    pub sensing_time_us: Option<f64>,
    pub amplitude_ut: Option<f64>,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub multitone: MultiToneSection,
    #[serde(default)]
    pub photocurrent: PhotocurrentSection,
    #[serde(default)]
    pub psd: PsdSection,
    pub protocol: Option<ProtocolSection>,
    #[serde(default)]
    pub opt: OptSection,
    #[serde(default)]
    pub pump: PumpSection,
    #[serde(default)]
    pub probe: ProbeSection,
    pub glass: Option<GlassSection>,
    pub noise_check: Option<NoiseCheckSection>,
}

/// Configuration failure, optionally anchored to a source line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(line), Some(key)) => write!(f, "line {line}: `{key}`: {}", self.message),
            (None, Some(key)) => write!(f, "`{key}`: {}", self.message),
            (Some(line), None) => write!(f, "line {line}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: Some(key.into()), line: None, message: message.into() }
    }

    /// Fill in the line where `key` is written in `source`.
    pub fn anchored(mut self, source: &str) -> Self {
        if self.line.is_none() {
            if let Some(key) = &self.key {
                self.line = locate_key(source, key);
            }
        }
        self
    }

    /// Convert a library validation error, naming its parameter as the key.
    pub fn from_error(err: &Error) -> Self {
        match err {
            Error::InvalidParameter { name, reason } => Self::new(name.to_string(), reason.clone()),
            Error::Mismatch { what, expected, actual } => {
                Self::new(*what, format!("expected {expected} entries, got {actual}"))
            }
            other => Self { key: None, line: None, message: other.to_string() },
        }
    }
}

/// 1-based line on which the dotted `key` is assigned, honouring `[table]`
/// headers. Keys defined inline (`table = { .. }`) are not found.
pub fn locate_key(source: &str, key: &str) -> Option<usize> {
    let (table, leaf) = match key.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", key),
    };
    let mut current = String::new();
    let mut table_line = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[') {
            current = header.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if current == table {
                table_line = Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        if (current == table && lhs == leaf) || (current.is_empty() && lhs == key) {
            return Some(i + 1);
        }
    }
    table_line
}

impl RunConfig {
    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| source[..s.start].matches('\n').count() + 1);
            Self::toml_error(e, line)
        })?;
        config.validate().map_err(|e| e.anchored(source))?;
        Ok(config)
    }

    fn toml_error(e: toml::de::Error, line: Option<usize>) -> ConfigError {
        ConfigError { key: None, line, message: e.message().to_string() }
    }

    /// Read a TOML config, or a `manifest.json` written by a previous run.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { key: None, line: None, message: format!("{}: {e}", path.display()) })?;
        let mut config = if path.extension().is_some_and(|e| e == "json") {
            Self::from_manifest(&text)?
        } else {
            Self::from_toml(&text)?
        };
        if let Some(glass) = &mut config.glass {
            let base = path.parent().unwrap_or(Path::new("."));
            for r in &mut glass.records {
                if r.is_relative() {
                    *r = base.join(&*r);
                }
            }
        }
        Ok(config)
    }

    pub fn from_manifest(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| ConfigError { key: None, line: Some(e.line()), message: e.to_string() })?;
        let config = value
            .get("config")
            .ok_or_else(|| ConfigError::new("config", "manifest has no `config` entry"))?;
        let config: Self = serde_json::from_value(config.clone())
            .map_err(|e| ConfigError { key: Some("config".into()), line: None, message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn experiment(&self) -> Result<Experiment, ConfigError> {
        self.experiment.ok_or_else(|| ConfigError::new("experiment", "no experiment given"))
    }

    /// Check every section that the experiment reads.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |r: crate::Result<()>| r.map_err(|e| ConfigError::from_error(&e));
        if let Some(t) = self.sensing_time_us {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ConfigError::new("sensing_time_us", "must be positive"));
            }
        }
        if let Some(b) = self.amplitude_ut {
            if !(b > 0.0 && b.is_finite()) {
                return Err(ConfigError::new("amplitude_ut", "must be positive"));
            }
        }
        if self.field.kind == FieldKind::Multitone {
            wrap(self.multitone_field().map(|_| ()))?;
        }
        wrap(self.psd().map(|_| ()))?;
        wrap(crate::optimizer::Adadelta::new(0, self.opt.momentum, self.opt.epsilon).map(|_| ()))?;
        if self.opt.record_stride == 0 {
            return Err(ConfigError::new("opt.record_stride", "must be at least 1"));
        }
        if let Some(p) = &self.protocol {
            let set = [
                ("n_pulses", p.n_pulses.is_some()),
                ("dt_ns", p.dt_ns.is_some()),
                ("init_range_rad", p.init_range_rad.is_some()),
                ("minibatch", p.minibatch.is_some()),
                ("pool_size", p.pool_size.is_some()),
                ("noise_seed", p.noise_seed.is_some()),
            ];
            let allowed: &[&str] = match p.kind.or(self.implied_protocol()) {
                Some(ProtocolKind::PiPulses) => &["n_pulses"],
                Some(ProtocolKind::Continuous) => &["dt_ns", "init_range_rad", "minibatch", "pool_size", "noise_seed"],
                None => &["n_pulses", "dt_ns", "init_range_rad", "minibatch", "pool_size", "noise_seed"],
            };
            if let Some((key, _)) = set.iter().find(|(k, on)| *on && !allowed.contains(k)) {
                return Err(ConfigError::new(
                    format!("protocol.{key}"),
                    format!("not used by this protocol type (allowed: {})", allowed.join(", ")),
                ));
            }
            if let Some(r) = p.init_range_rad {
                if !(0.0..=std::f64::consts::PI).contains(&r) {
                    return Err(ConfigError::new("protocol.init_range_rad", "must lie in [0, π]"));
                }
            }
            if p.dt_ns.is_some_and(|d| !(d > 0.0)) {
                return Err(ConfigError::new("protocol.dt_ns", "must be positive"));
            }
            if p.minibatch == Some(0) {
                return Err(ConfigError::new("protocol.minibatch", "must be at least 1"));
            }
            if let (Some(m), Some(p)) = (p.minibatch, p.pool_size) {
                if m > p {
                    return Err(ConfigError::new("protocol.minibatch", "exceeds protocol.pool_size"));
                }
            }
        }
        if let (Some(expected), Some(given)) = (self.implied_protocol(), self.protocol.as_ref().and_then(|p| p.kind)) {
            if given != expected {
                return Err(ConfigError::new(
                    "protocol.type",
                    format!("does not match experiment {}", self.experiment.map_or("", |e| e.name())),
                ));
            }
        }
        if self.experiment == Some(Experiment::OptimizePump) {
            if self.field.kind != FieldKind::Photocurrent {
                return Err(ConfigError::new("field.type", "optimize_pump needs field.type = \"photocurrent\""));
            }
            wrap(self.pump_config().map(|_| ()))?;
        }
        if let Some(g) = &self.glass {
            if g.n_w == 0 {
                return Err(ConfigError::new("glass.n_w", "wait time must be at least 1"));
            }
            if g.records.is_empty() && g.runs.unwrap_or(0) == 0 {
                return Err(ConfigError::new("glass.runs", "give record files or a positive run count"));
            }
            if g.families.is_empty() {
                return Err(ConfigError::new("glass.families", "name at least one protocol family"));
            }
            if !g.records.is_empty() && g.families.len() != 1 {
                return Err(ConfigError::new("glass.records", "record files need exactly one entry in glass.families"));
            }
        }
        if let Some(n) = &self.noise_check {
            if n.traces < 2 {
                return Err(ConfigError::new("noise_check.traces", "need at least two traces"));
            }
            if n.psd_samples < 2 {
                return Err(ConfigError::new("noise_check.psd_samples", "need at least two samples"));
            }
            if !(n.dt_ns > 0.0) {
                return Err(ConfigError::new("noise_check.dt_ns", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn multitone_field(&self) -> crate::Result<MultiToneField> {
        let m = &self.multitone;
        MultiToneField::from_khz(&m.weights, &m.freqs_khz, &m.phases)
    }

    pub fn psd(&self) -> crate::Result<PowerSpectralDensity> {
        PowerSpectralDensity::new(self.psd.floor, self.psd.components.clone())
    }

    /// Sensing time in seconds; the pump experiment has its own default.
    pub fn sensing_time(&self) -> f64 {
        let default = match self.experiment {
            Some(Experiment::OptimizePump) => DEFAULT_SENSING_TIME / MICROSECOND,
            _ => DEFAULT_SENSING_TIME_US,
        };
        self.sensing_time_us.unwrap_or(default) * MICROSECOND
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude_ut.unwrap_or(DEFAULT_B)
    }

    fn implied_protocol(&self) -> Option<ProtocolKind> {
        match self.experiment? {
            Experiment::OptimizePi => Some(ProtocolKind::PiPulses),
            Experiment::OptimizeContinuous => Some(ProtocolKind::Continuous),
            _ => None,
        }
    }

    fn protocol_section(&self) -> ProtocolSection {
        self.protocol.clone().unwrap_or_default()
    }

    pub fn n_pulses(&self) -> usize {
        self.protocol_section().n_pulses.unwrap_or(DEFAULT_PI_PULSES)
    }

    pub fn continuous(&self) -> ContinuousSettings {
        let p = self.protocol_section();
        ContinuousSettings {
            dt: p.dt_ns.map_or(DEFAULT_DT, |d| d * NANOSECOND),
            init_range: p.init_range_rad.unwrap_or(DEFAULT_INIT_RANGE),
            minibatch: p.minibatch.unwrap_or(DEFAULT_MINIBATCH),
            pool_size: p.pool_size.unwrap_or(DEFAULT_POOL_SIZE),
            noise_seed: p.noise_seed.unwrap_or(DEFAULT_NOISE_SEED),
        }
    }

    pub fn pump_joint(&self) -> bool {
        self.pump.joint.unwrap_or(false)
    }

    pub fn pump_config(&self) -> crate::Result<PumpProbeConfig> {
        let tau = self.pump.tau_us.map_or(DEFAULT_TAU, |t| t * MICROSECOND);
        let switches = match &self.photocurrent.switch_times_us {
            Some(s) => s.iter().map(|t| t * MICROSECOND).collect(),
            None => pump_train(self.pump.n_pulses.unwrap_or(DEFAULT_PUMP_PULSES), tau),
        };
        let flips = probe_flips(
            self.probe.mode.unwrap_or(ProbeMode::FrontLoaded),
            self.probe.n_pulses.unwrap_or(DEFAULT_PROBE_PULSES),
            tau,
        );
        let config = PumpProbeConfig {
            pump_switches: switches,
            probe_flips: flips,
            t0: self.probe.t0_us.map_or(DEFAULT_T0, |t| t * MICROSECOND),
            sensing_time: self.sensing_time(),
            b_max_mg: self.photocurrent.bmax_mg.unwrap_or(DEFAULT_B_MAX_MG),
            tau_rise: self.photocurrent.tau_rise_us.map_or(DEFAULT_TAU_RISE, |t| t * MICROSECOND),
        };
        config.validate()?;
        Ok(config)
    }

    /// Copy with every defaulted value written out, for the manifest.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.sensing_time_us = Some(self.sensing_time() / MICROSECOND);
        c.amplitude_ut = Some(self.amplitude());
        match self.experiment {
            Some(Experiment::OptimizePi) => {
                let mut p = self.protocol_section();
                p.kind = Some(ProtocolKind::PiPulses);
                p.n_pulses = Some(self.n_pulses());
                c.protocol = Some(p);
            }
            Some(Experiment::OptimizeContinuous) => {
                let s = self.continuous();
                let mut p = self.protocol_section();
                p.kind = Some(ProtocolKind::Continuous);
                p.dt_ns = Some(s.dt / NANOSECOND);
                p.init_range_rad = Some(s.init_range);
                p.minibatch = Some(s.minibatch);
                p.pool_size = Some(s.pool_size);
                p.noise_seed = Some(s.noise_seed);
                c.protocol = Some(p);
            }
            Some(Experiment::OptimizePump) => {
                c.pump.n_pulses = Some(self.pump.n_pulses.unwrap_or(DEFAULT_PUMP_PULSES));
                c.pump.tau_us = Some(self.pump.tau_us.unwrap_or(DEFAULT_TAU / MICROSECOND));
                c.pump.joint = Some(self.pump_joint());
                c.probe.mode = Some(self.probe.mode.unwrap_or(ProbeMode::FrontLoaded));
                c.probe.n_pulses = Some(self.probe.n_pulses.unwrap_or(DEFAULT_PROBE_PULSES));
                c.probe.t0_us = Some(self.probe.t0_us.unwrap_or(DEFAULT_T0 / MICROSECOND));
                c.photocurrent.bmax_mg = Some(self.photocurrent.bmax_mg.unwrap_or(DEFAULT_B_MAX_MG));
                c.photocurrent.tau_rise_us =
                    Some(self.photocurrent.tau_rise_us.unwrap_or(DEFAULT_TAU_RISE / MICROSECOND));
            }
            Some(Experiment::NoiseCheck) => {
                c.noise_check = Some(self.noise_check.clone().unwrap_or_default());
            }
            _ => {}
        }
        c
    }
}

/// Continuous-drive settings in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousSettings {
    pub dt: f64,
    pub init_range: f64,
    pub minibatch: usize,
    pub pool_size: usize,
    pub noise_seed: u64,
}
