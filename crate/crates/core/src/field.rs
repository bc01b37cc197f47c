//! Deterministic target signals whose amplitude the sensor estimates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensionless time profile `f(t)` of the sensed field `B(t) = b·f(t)`.
pub trait Waveform {
    fn value(&self, t: f64) -> f64;

    /// Exact `∫_a^b f(t) dt`.
    fn integral(&self, a: f64, b: f64) -> f64;
}

impl<W: Waveform + ?Sized> Waveform for &W {
    fn value(&self, t: f64) -> f64 {
        (**self).value(t)
    }
    fn integral(&self, a: f64, b: f64) -> f64 {
        (**self).integral(a, b)
    }
}

/// `f(t + offset)`: re-bases a waveform onto a window that starts at `offset`.
#[derive(Debug, Clone, Copy)]
pub struct Shifted<W> {
    pub inner: W,
    pub offset: f64,
}

impl<W: Waveform> Waveform for Shifted<W> {
    fn value(&self, t: f64) -> f64 {
        self.inner.value(t + self.offset)
    }
    fn integral(&self, a: f64, b: f64) -> f64 {
        self.inner.integral(a + self.offset, b + self.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub weight: f64,
    pub frequency_hz: f64,
    pub phase: f64,
}

/// `f(t) = Σ wᵢ cos(2πνᵢt + αᵢ)` with `Σ wᵢ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiToneField {
    tones: Vec<Tone>,
}

impl MultiToneField {
    pub fn new(tones: Vec<Tone>) -> Result<Self> {
        if tones.is_empty() {
            return Err(Error::invalid("multitone.weights", "at least one tone is required"));
        }
        if let Some(t) = tones.iter().find(|t| !(t.weight >= 0.0 && t.weight.is_finite())) {
            return Err(Error::invalid("multitone.weights", format!("weights must be non-negative, got {}", t.weight)));
        }
        if let Some(t) = tones.iter().find(|t| !(t.frequency_hz > 0.0 && t.frequency_hz.is_finite())) {
            return Err(Error::invalid("multitone.freqs_khz", format!("frequencies must be positive, got {}", t.frequency_hz)));
        }
        if tones.iter().any(|t| !t.phase.is_finite()) {
            return Err(Error::invalid("multitone.phases", "phases must be finite"));
        }
        let total: f64 = tones.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("multitone.weights", format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { tones })
    }

    /// Build from parallel lists; frequencies in kHz.
    pub fn from_khz(weights: &[f64], freqs_khz: &[f64], phases: &[f64]) -> Result<Self> {
        if weights.len() != freqs_khz.len() {
            return Err(Error::Mismatch { what: "multitone.freqs_khz", expected: weights.len(), actual: freqs_khz.len() });
        }
        if phases.len() != weights.len() {
            return Err(Error::Mismatch { what: "multitone.phases", expected: weights.len(), actual: phases.len() });
        }
        let tones = weights
            .iter()
            .zip(freqs_khz)
            .zip(phases)
            .map(|((&weight, &khz), &phase)| Tone { weight, frequency_hz: khz * 1e3, phase })
            .collect();
        Self::new(tones)
    }

    /// Trichromatic target used for the single-qubit sensitivity comparison.
    pub fn comparison_target() -> Self {
        Self::from_khz(&[0.45, 0.43, 0.12], &[77.0, 96.0, 144.0], &[0.3; 3]).expect("valid tones")
    }

    /// Trichromatic target used for the landscape (aging) study. Phases are
    /// not given for this target; 0.3 rad is reused from the comparison target.
    pub fn aging_target() -> Self {
        Self::from_khz(&[0.34, 0.46, 0.20], &[148.0, 55.0, 165.0], &[0.3; 3]).expect("valid tones")
    }

    pub fn tones(&self) -> &[Tone] {
        &self.tones
    }
}

impl Waveform for MultiToneField {
    fn value(&self, t: f64) -> f64 {
        self.tones
            .iter()
            .map(|tone| tone.weight * (2.0 * PI * tone.frequency_hz * t + tone.phase).cos())
            .sum()
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        self.tones
            .iter()
            .map(|tone| {
                let w = 2.0 * PI * tone.frequency_hz;
                // sin(x) - sin(y) = 2 cos((x+y)/2) sin((x-y)/2), stable for short spans
                let mid = w * 0.5 * (a + b) + tone.phase;
                let half = w * 0.5 * (b - a);
                tone.weight * 2.0 * mid.cos() * half.sin() / w
            })
            .sum()
    }
}

/// One relaxation leg of the photocurrent: from `start` the field relaxes
/// toward `target` (1 while pumped, 0 otherwise), in units of `B_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Leg {
    start: f64,
    end: f64,
    target: f64,
    initial: f64,
}

/// Field of a Nernst photocurrent driven by a switched pump laser.
///
/// Switch times alternate on/off beginning with "on" (even index turns the
/// pump on). The field is zero before the first switch and relaxes
/// exponentially with `tau_rise` toward `B_max` while pumped and toward zero
/// otherwise, so it is continuous everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotocurrentField {
    b_max_mg: f64,
    tau_rise: f64,
    switch_times: Vec<f64>,
    legs: Vec<Leg>,
}

pub const DEFAULT_B_MAX_MG: f64 = 0.5016;
pub const DEFAULT_TAU_RISE: f64 = 1.3e-6;

impl PhotocurrentField {
    pub fn new(b_max_mg: f64, tau_rise: f64, switch_times: Vec<f64>) -> Result<Self> {
        if !(b_max_mg > 0.0 && b_max_mg.is_finite()) {
            return Err(Error::invalid("photocurrent.bmax_mg", format!("must be positive, got {b_max_mg}")));
        }
        if !(tau_rise > 0.0 && tau_rise.is_finite()) {
            return Err(Error::invalid("photocurrent.tau_rise_us", format!("must be positive, got {tau_rise}")));
        }
        if switch_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::invalid("photocurrent.switch_times_us", "switch times must be finite and non-negative"));
        }
        if switch_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("photocurrent.switch_times_us", "switch times must be strictly increasing"));
        }
        let mut legs = Vec::with_capacity(switch_times.len());
        let mut level = 0.0;
        for (j, &start) in switch_times.iter().enumerate() {
            let end = switch_times.get(j + 1).copied().unwrap_or(f64::INFINITY);
            let target = if j % 2 == 0 { 1.0 } else { 0.0 };
            legs.push(Leg { start, end, target, initial: level });
            level = if end.is_finite() {
                target - (target - level) * (-(end - start) / tau_rise).exp()
            } else {
                target
            };
        }
        Ok(Self { b_max_mg, tau_rise, switch_times, legs })
    }

    pub fn b_max_mg(&self) -> f64 {
        self.b_max_mg
    }

    pub fn tau_rise(&self) -> f64 {
        self.tau_rise
    }

    pub fn switch_times(&self) -> &[f64] {
        &self.switch_times
    }

    /// Field in mG.
    pub fn field_mg(&self, t: f64) -> f64 {
        self.b_max_mg * self.value(t)
    }

    fn leg_at(&self, t: f64) -> Option<&Leg> {
        // last leg whose start is <= t
        let idx = self.legs.partition_point(|l| l.start <= t);
        idx.checked_sub(1).map(|i| &self.legs[i])
    }
}

impl Waveform for PhotocurrentField {
    /// Field normalized by `B_max`.
    fn value(&self, t: f64) -> f64 {
        match self.leg_at(t) {
            None => 0.0,
            Some(l) => l.target - (l.target - l.initial) * (-(t - l.start) / self.tau_rise).exp(),
        }
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return -self.integral(b, a);
        }
        let tau = self.tau_rise;
        let mut total = 0.0;
        for l in &self.legs {
            let lo = a.max(l.start);
            let hi = b.min(l.end);
            if hi <= lo {
                continue;
            }
            let decay = (-(lo - l.start) / tau).exp() - (-(hi - l.start) / tau).exp();
            total += l.target * (hi - lo) - (l.target - l.initial) * tau * decay;
        }
        total
    }
}
