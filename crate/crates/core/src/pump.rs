//! Pump-probe sensing of a photocurrent field.
//!
//! A pump laser switched on and off drives a photocurrent whose field
//! `B_ph(t)` is the signal. The probe is a π-pulse sequence that starts at
//! `t0` and runs to `T`; its sensitivity to `B_max` follows from the π-pulse
//! formulas with `f(t) = B_ph(t)/B_max` on the window `[t0, T]`.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{PhotocurrentField, Shifted, DEFAULT_B_MAX_MG, DEFAULT_TAU_RISE};
use crate::noise::PowerSpectralDensity;
use crate::optimizer::{run_sgd, Evaluation, Objective, Projection, RunRecord, SgdFailure, SgdSettings};
use crate::pulses::{phase_of, settle_times, DecoherenceKernel, PiPulseEngine, COLLISION_GAP, LOSS_SCALE};
use crate::MICROSECOND;

pub const DEFAULT_T0: f64 = 0.897e-6;
pub const DEFAULT_SENSING_TIME: f64 = 121.6e-6;
pub const DEFAULT_TAU: f64 = 7.6e-6;
pub const DEFAULT_PUMP_PULSES: usize = 8;
pub const DEFAULT_PROBE_PULSES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Every probe pulse at the start of the window; they cancel in pairs.
    FrontLoaded,
    /// Evenly spaced pulses at `t0 + (k - 1/2)·τ`.
    Cp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpProbeConfig {
    /// Absolute switch times in seconds, even index turns the pump on.
    pub pump_switches: Vec<f64>,
    /// Probe flip times relative to `t0`; coincident flips are allowed.
    pub probe_flips: Vec<f64>,
    pub t0: f64,
    pub sensing_time: f64,
    pub b_max_mg: f64,
    pub tau_rise: f64,
}

/// `n` pump pulses of length `tau` separated by `tau`, starting at 0.
pub fn pump_train(n: usize, tau: f64) -> Vec<f64> {
    (0..2 * n).map(|j| j as f64 * tau).collect()
}

/// Probe flips (window-relative) for `mode`.
pub fn probe_flips(mode: ProbeMode, n: usize, tau: f64) -> Vec<f64> {
    match mode {
        ProbeMode::FrontLoaded => vec![0.0; n],
        ProbeMode::Cp => (1..=n).map(|k| (k as f64 - 0.5) * tau).collect(),
    }
}

impl PumpProbeConfig {
    pub fn new(pump_switches: Vec<f64>, probe_flips: Vec<f64>, t0: f64, sensing_time: f64) -> Result<Self> {
        let c = Self { pump_switches, probe_flips, t0, sensing_time, b_max_mg: DEFAULT_B_MAX_MG, tau_rise: DEFAULT_TAU_RISE };
        c.validate()?;
        Ok(c)
    }

    /// Pump train of `n_pump` pulses and a probe of `n_probe` pulses, both on
    /// the spacing `tau`, with the default timing window.
    pub fn initial(n_pump: usize, tau: f64, mode: ProbeMode, n_probe: usize) -> Result<Self> {
        Self::new(pump_train(n_pump, tau), probe_flips(mode, n_probe, tau), DEFAULT_T0, DEFAULT_SENSING_TIME)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sensing_time > 0.0 && self.t0 >= 0.0 && self.t0 < self.sensing_time) {
            return Err(Error::invalid("t0_us", "need 0 <= t0 < T"));
        }
        if self.pump_switches.iter().any(|&t| !(0.0..=self.sensing_time).contains(&t)) {
            return Err(Error::invalid("pump.switch_times_us", "pump switches must lie in [0, T]"));
        }
        let window = self.window();
        if self.probe_flips.iter().any(|&t| !(0.0..window).contains(&t)) {
            return Err(Error::invalid("probe.flips_us", "probe flips must lie in [t0, T)"));
        }
        self.field().map(|_| ())
    }

    pub fn window(&self) -> f64 {
        self.sensing_time - self.t0
    }

    pub fn field(&self) -> Result<PhotocurrentField> {
        PhotocurrentField::new(self.b_max_mg, self.tau_rise, self.pump_switches.clone())
    }
}

fn probe_engine(config: &PumpProbeConfig, psd: &PowerSpectralDensity) -> Result<PiPulseEngine<Shifted<PhotocurrentField>>> {
    Ok(PiPulseEngine::new(Shifted { inner: config.field()?, offset: config.t0 }, psd, config.window()))
}

fn eta_of(chi: f64, phi: f64, sensing_time: f64) -> Result<f64> {
    if phi == 0.0 || !phi.is_finite() {
        return Err(Error::BlindProtocol);
    }
    Ok(chi.exp() * sensing_time.sqrt() / phi.abs())
}

/// `η = e^χ √T / |φ|` for estimating `B_max` in μT, where `φ` and `χ` are
/// integrated over the probe window and `T` is the full shot length.
pub fn pump_sensitivity(config: &PumpProbeConfig, psd: &PowerSpectralDensity) -> Result<f64> {
    config.validate()?;
    let engine = probe_engine(config, psd)?;
    eta_of(engine.chi_of(&config.probe_flips), engine.phase_of(&config.probe_flips), config.sensing_time)
}

/// Sorted switch times with exact coincidences annihilated, as the field
/// needs strictly increasing times.
fn canonical_switches(times: &[f64], hi: f64) -> Vec<f64> {
    settle_times(times, 0.0, hi, f64::MIN_POSITIVE).0
}

/// Optimizer view of the pump schedule (and, when `joint`, the probe).
/// Parameters are absolute times in μs, pump switches first; the loss is η in
/// μT·μs^{1/2}.
#[derive(Debug, Clone)]
pub struct PumpObjective {
    config: PumpProbeConfig,
    kernel: DecoherenceKernel,
    joint: bool,
    n_pump: Cell<usize>,
}

impl PumpObjective {
    pub fn new(config: PumpProbeConfig, psd: &PowerSpectralDensity, joint: bool) -> Result<Self> {
        config.validate()?;
        let kernel = DecoherenceKernel::new(psd, config.window());
        let n_pump = Cell::new(config.pump_switches.len());
        Ok(Self { config, kernel, joint, n_pump })
    }

    pub fn initial_parameters(&self) -> Vec<f64> {
        let mut theta: Vec<f64> = self.config.pump_switches.iter().map(|t| t / MICROSECOND).collect();
        if self.joint {
            theta.extend(self.config.probe_flips.iter().map(|t| (t + self.config.t0) / MICROSECOND));
        }
        theta
    }

    /// Configuration described by a parameter vector.
    pub fn config_at(&self, theta: &[f64]) -> PumpProbeConfig {
        let split = self.n_pump.get().min(theta.len());
        let mut c = self.config.clone();
        c.pump_switches = theta[..split].iter().map(|t| t * MICROSECOND).collect();
        if self.joint {
            c.probe_flips = theta[split..].iter().map(|t| t * MICROSECOND - c.t0).collect();
        }
        c
    }

    fn phase(&self, switches: &[f64], flips: &[f64]) -> Result<f64> {
        let field = PhotocurrentField::new(
            self.config.b_max_mg,
            self.config.tau_rise,
            canonical_switches(switches, self.config.sensing_time),
        )?;
        Ok(phase_of(flips, self.config.window(), &Shifted { inner: field, offset: self.config.t0 }))
    }
}

impl Objective for PumpObjective {
    fn evaluate(&mut self, theta: &[f64], _rng: &mut ChaCha8Rng) -> Result<Evaluation> {
        let c = self.config_at(theta);
        let h = COLLISION_GAP;
        let phi = self.phase(&c.pump_switches, &c.probe_flips)?;
        let chi = self.kernel.chi_of(&c.probe_flips);
        let d_chi = if self.joint { self.kernel.chi_differences(&c.probe_flips, h) } else { Vec::new() };
        let eta = eta_of(chi, phi, c.sensing_time)?;

        let mut gradient = Vec::with_capacity(theta.len());
        let mut moved = c.pump_switches.clone();
        for j in 0..moved.len() {
            moved[j] = c.pump_switches[j] + h;
            let plus = self.phase(&moved, &c.probe_flips)?;
            moved[j] = c.pump_switches[j] - h;
            let minus = self.phase(&moved, &c.probe_flips)?;
            moved[j] = c.pump_switches[j];
            let d_phi = (plus - minus) / (2.0 * h);
            gradient.push(-eta / phi * d_phi);
        }
        if self.joint {
            let mut moved = c.probe_flips.clone();
            for j in 0..moved.len() {
                moved[j] = c.probe_flips[j] + h;
                let plus = self.phase(&c.pump_switches, &moved)?;
                moved[j] = c.probe_flips[j] - h;
                let minus = self.phase(&c.pump_switches, &moved)?;
                moved[j] = c.probe_flips[j];
                let d_phi = (plus - minus) / (2.0 * h);
                gradient.push(eta * d_chi[j] - eta / phi * d_phi);
            }
        }
        Ok(Evaluation {
            loss: eta * LOSS_SCALE,
            eta,
            gradient: gradient.iter().map(|g| g * LOSS_SCALE * MICROSECOND).collect(),
            minibatch: Vec::new(),
        })
    }

    fn project(&self, theta: Vec<f64>) -> Projection {
        let split = self.n_pump.get().min(theta.len());
        let t_us = self.config.sensing_time / MICROSECOND;
        let gap = COLLISION_GAP / MICROSECOND;
        let (mut out, mut kept) = settle_times(&theta[..split], 0.0, t_us, gap);
        self.n_pump.set(out.len());
        if self.joint {
            let t0 = self.config.t0 / MICROSECOND;
            let (probe, probe_kept) = settle_times(&theta[split..], t0 + gap, t_us - gap, gap);
            out.extend(probe);
            kept.extend(probe_kept.into_iter().map(|i| i + split));
        }
        Projection { theta: out, kept }
    }
}

/// Adadelta on the pump switch times (plus the probe when `joint`).
pub fn optimize_pump(
    config: &PumpProbeConfig,
    psd: &PowerSpectralDensity,
    settings: &SgdSettings,
    joint: bool,
) -> std::result::Result<RunRecord, SgdFailure> {
    let mut objective = PumpObjective::new(config.clone(), psd, joint).map_err(|e| SgdFailure::before_start(e, settings))?;
    let theta0 = objective.initial_parameters();
    run_sgd(&mut objective, theta0, settings)
}
