//! Sensitivity of instantaneous π-pulse protocols.
//!
//! A protocol is a set of flip times; its switching function `y(t)` starts at
//! +1 and changes sign at every flip. The signal phase is `φ = ∫γ f y dt`, the
//! noise enters through the filter function `|y(ω)|²`, and the sensitivity is
//! `η = e^χ √T / |φ|` with `χ = (1/4π) ∫ S(ω) |y(ω)|² dω`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Waveform;
use crate::noise::PowerSpectralDensity;
use crate::optimizer::{run_sgd, Evaluation, Objective, Projection, RunRecord, SgdFailure, SgdSettings};
use crate::{GYROMAGNETIC_RATIO, MICROSECOND, NANOSECOND};

/// Flips closer than this annihilate; also the finite-difference step.
pub const COLLISION_GAP: f64 = NANOSECOND;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiPulseProtocol {
    pulse_times: Vec<f64>,
    sensing_time: f64,
}

impl PiPulseProtocol {
    pub fn new(pulse_times: Vec<f64>, sensing_time: f64) -> Result<Self> {
        if !(sensing_time > 0.0 && sensing_time.is_finite()) {
            return Err(Error::invalid("sensing_time_us", format!("must be positive, got {sensing_time}")));
        }
        if pulse_times.iter().any(|&t| !(t > 0.0 && t < sensing_time)) {
            return Err(Error::invalid("pulse_times", "pulse times must lie strictly inside (0, T)"));
        }
        if pulse_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("pulse_times", "pulse times must be strictly increasing"));
        }
        Ok(Self { pulse_times, sensing_time })
    }

    pub fn free(sensing_time: f64) -> Result<Self> {
        Self::new(Vec::new(), sensing_time)
    }

    /// Evenly spaced pulses at `(k - 1/2)·T/n`.
    pub fn carr_purcell(n: usize, sensing_time: f64) -> Result<Self> {
        let spacing = sensing_time / n.max(1) as f64;
        Self::new((1..=n).map(|k| (k as f64 - 0.5) * spacing).collect(), sensing_time)
    }

    /// Inverse of [`gaps`](Self::gaps).
    pub fn from_gaps(gaps: &[f64], sensing_time: f64) -> Result<Self> {
        let times = gaps
            .iter()
            .scan(0.0, |t, &g| {
                *t += g;
                Some(*t)
            })
            .collect();
        Self::new(times, sensing_time)
    }

    pub fn pulse_times(&self) -> &[f64] {
        &self.pulse_times
    }

    pub fn sensing_time(&self) -> f64 {
        self.sensing_time
    }

    pub fn len(&self) -> usize {
        self.pulse_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pulse_times.is_empty()
    }

    /// `Δt_j = t_j - t_{j-1}` with `t_0 = 0`.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.pulse_times
            .iter()
            .map(|&t| {
                let g = t - prev;
                prev = t;
                g
            })
            .collect()
    }

    /// Time-reversed protocol, `t_j → T - t_j`.
    pub fn reversed(&self) -> Self {
        let mut times: Vec<f64> = self.pulse_times.iter().map(|t| self.sensing_time - t).collect();
        times.reverse();
        Self { pulse_times: times, sensing_time: self.sensing_time }
    }
}

/// `y(t) = (-1)^{#{j : t_j ≤ t}}`.
pub fn switching_function(protocol: &PiPulseProtocol, t: f64) -> f64 {
    let flips = protocol.pulse_times.partition_point(|&tj| tj <= t);
    if flips % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Signed segments `(a, b, s)` of a switching function on `[0, T]`.
///
/// Flips need not be validated: they are sorted, flips at or before 0 toggle
/// the initial sign, flips at or after `T` are ignored, and coincident flips
/// produce empty segments.
fn segments(flips: &[f64], sensing_time: f64) -> Vec<(f64, f64, f64)> {
    let mut inside: Vec<f64> = Vec::with_capacity(flips.len());
    let mut sign = 1.0;
    for &t in flips {
        if t <= 0.0 {
            sign = -sign;
        } else if t < sensing_time {
            inside.push(t);
        }
    }
    inside.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(inside.len() + 1);
    let mut start = 0.0;
    for t in inside {
        out.push((start, t, sign));
        start = t;
        sign = -sign;
    }
    out.push((start, sensing_time, sign));
    out
}

/// Breakpoints `τ_j` and jump weights `c_j` with `iω·y(ω) = Σ c_j e^{iωτ_j}`.
fn breakpoints(flips: &[f64], sensing_time: f64) -> (Vec<f64>, Vec<f64>) {
    let segs = segments(flips, sensing_time);
    let mut taus = Vec::with_capacity(segs.len() + 1);
    let mut coeffs = Vec::with_capacity(segs.len() + 1);
    taus.push(0.0);
    coeffs.push(-segs[0].2);
    for w in segs.windows(2) {
        taus.push(w[0].1);
        coeffs.push(w[0].2 - w[1].2);
    }
    let last = segs[segs.len() - 1];
    taus.push(last.1);
    coeffs.push(last.2);
    (taus, coeffs)
}

pub(crate) fn phase_of<W: Waveform + ?Sized>(flips: &[f64], sensing_time: f64, field: &W) -> f64 {
    GYROMAGNETIC_RATIO
        * segments(flips, sensing_time)
            .into_iter()
            .map(|(a, b, s)| s * field.integral(a, b))
            .sum::<f64>()
}

/// `φ(T) = ∫₀ᵀ γ f(t) y(t) dt` in rad per μT, exact per segment.
pub fn accumulated_phase<W: Waveform + ?Sized>(protocol: &PiPulseProtocol, field: &W) -> f64 {
    phase_of(&protocol.pulse_times, protocol.sensing_time, field)
}

/// `|y(ω)|²` in s², `y(ω) = ∫₀ᵀ y(t) e^{iωt} dt`.
pub fn filter_function(protocol: &PiPulseProtocol, omega: f64) -> f64 {
    segments(&protocol.pulse_times, protocol.sensing_time)
        .into_iter()
        .map(|(a, b, s)| {
            // ∫_a^b e^{iωt} dt = (b - a) e^{iω(a+b)/2} sinc(ω(b-a)/2)
            let half = 0.5 * omega * (b - a);
            let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
            Complex64::from_polar(s * (b - a) * sinc, 0.5 * omega * (a + b))
        })
        .sum::<Complex64>()
        .norm_sqr()
}

/// Quadrature rule for `χ`. The white floor is integrated exactly through
/// Parseval (`floor·T/2`); the Gaussian peaks are summed on a uniform grid
/// fine enough to resolve both the narrowest peak and the filter lobes.
#[derive(Debug, Clone)]
pub struct DecoherenceKernel {
    floor_chi: f64,
    sensing_time: f64,
    d_omega: f64,
    /// `Δω·G(ω_k)/2π`, half weight at `k = 0`.
    weights: Vec<f64>,
}

impl DecoherenceKernel {
    pub fn new(psd: &PowerSpectralDensity, sensing_time: f64) -> Self {
        let mut d_omega = 2.0 * PI / (4.0 * sensing_time);
        if let Some(sigma) = psd.narrowest_sigma() {
            d_omega = d_omega.min(0.5 * sigma);
        }
        let weights = if psd.peaks().is_empty() {
            Vec::new()
        } else {
            let n = (psd.reach() / d_omega).ceil() as usize;
            (0..=n)
                .map(|k| {
                    let half = if k == 0 { 0.5 } else { 1.0 };
                    half * d_omega * psd.peak_part(k as f64 * d_omega) / (2.0 * PI)
                })
                .collect()
        };
        Self { floor_chi: 0.5 * psd.floor() * sensing_time, sensing_time, d_omega, weights }
    }

    pub fn sensing_time(&self) -> f64 {
        self.sensing_time
    }

    pub fn grid_len(&self) -> usize {
        self.weights.len()
    }

    /// `Σ_j c_j e^{iω_k τ_j}` for every grid frequency, plus `y(0)`.
    fn numerators(&self, taus: &[f64], coeffs: &[f64]) -> (Vec<Complex64>, f64) {
        let y0: f64 = taus.iter().zip(coeffs).map(|(t, c)| t * c).sum();
        let step: Vec<Complex64> = taus.iter().map(|&t| Complex64::from_polar(1.0, self.d_omega * t)).collect();
        let mut phasor: Vec<Complex64> = coeffs.iter().map(|&c| Complex64::new(c, 0.0)).collect();
        let mut out = Vec::with_capacity(self.weights.len());
        for _ in 0..self.weights.len() {
            out.push(phasor.iter().sum());
            for (p, s) in phasor.iter_mut().zip(&step) {
                *p *= s;
            }
        }
        (out, y0)
    }

    fn peak_chi(&self, numerators: &[Complex64], y0: f64) -> f64 {
        if self.weights.is_empty() {
            return 0.0;
        }
        let mut acc = self.weights[0] * y0 * y0;
        for (k, (w, num)) in self.weights.iter().zip(numerators).enumerate().skip(1) {
            let omega = k as f64 * self.d_omega;
            acc += w * num.norm_sqr() / (omega * omega);
        }
        acc
    }

    /// `χ` for an arbitrary (unvalidated) flip set on `[0, T]`.
    pub fn chi_of(&self, flips: &[f64]) -> f64 {
        if self.weights.is_empty() {
            return self.floor_chi;
        }
        let (taus, coeffs) = breakpoints(flips, self.sensing_time);
        let (nums, y0) = self.numerators(&taus, &coeffs);
        self.floor_chi + self.peak_chi(&nums, y0)
    }

    /// Central differences of `χ` in every flip time with step `h`.
    ///
    /// Moving one breakpoint without crossing a neighbor only shifts its own
    /// phasor, so each perturbed `χ` costs one pass over the grid.
    pub(crate) fn chi_differences(&self, flips: &[f64], h: f64) -> Vec<f64> {
        if self.weights.is_empty() {
            return vec![0.0; flips.len()];
        }
        let (taus, coeffs) = breakpoints(flips, self.sensing_time);
        let (nums, y0) = self.numerators(&taus, &coeffs);
        let mut sorted = flips.to_vec();
        sorted.sort_by(f64::total_cmp);
        let simple = flips.len() + 2 == taus.len()
            && flips.windows(2).all(|w| w[0] < w[1])
            && flips.first().is_none_or(|&t| t > 0.0);
        let mut out = Vec::with_capacity(flips.len());
        for j in 0..flips.len() {
            let t = flips[j];
            let lower = if j == 0 { 0.0 } else { flips[j - 1] };
            let upper = flips.get(j + 1).copied().unwrap_or(self.sensing_time);
            if simple && t - h > lower && t + h < upper {
                let c = coeffs[j + 1];
                let plus = self.shifted_chi(&nums, y0, t, c, h);
                let minus = self.shifted_chi(&nums, y0, t, c, -h);
                out.push((plus - minus) / (2.0 * h));
            } else {
                let mut moved = flips.to_vec();
                moved[j] = t + h;
                let plus = self.chi_of(&moved);
                moved[j] = t - h;
                let minus = self.chi_of(&moved);
                out.push((plus - minus) / (2.0 * h));
            }
        }
        out
    }

    fn shifted_chi(&self, nums: &[Complex64], y0: f64, t: f64, c: f64, h: f64) -> f64 {
        let mut acc = self.weights[0] * (y0 + c * h).powi(2);
        let step_t = Complex64::from_polar(1.0, self.d_omega * t);
        let step_h = Complex64::from_polar(1.0, self.d_omega * h);
        let mut at = step_t;
        let mut shift = step_h;
        for (k, (w, num)) in self.weights.iter().zip(nums).enumerate().skip(1) {
            let omega = k as f64 * self.d_omega;
            let moved = num + c * at * (shift - 1.0);
            acc += w * moved.norm_sqr() / (omega * omega);
            at *= step_t;
            shift *= step_h;
        }
        self.floor_chi + acc
    }
}

/// `χ(T) = (1/4π) ∫ S(ω) |y(ω)|² dω`.
pub fn decoherence_chi(protocol: &PiPulseProtocol, psd: &PowerSpectralDensity) -> f64 {
    DecoherenceKernel::new(psd, protocol.sensing_time).chi_of(&protocol.pulse_times)
}

fn eta_from(chi: f64, phi: f64, sensing_time: f64) -> Result<f64> {
    if phi == 0.0 || !phi.is_finite() {
        return Err(Error::BlindProtocol);
    }
    Ok(chi.exp() * sensing_time.sqrt() / phi.abs())
}

/// Sensitivity of flip-time protocols against one target field and bath.
#[derive(Debug, Clone)]
pub struct PiPulseEngine<W> {
    field: W,
    kernel: DecoherenceKernel,
}

/// Sensitivity and its central-difference gradient in the flip times (SI units).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityGradient {
    pub eta: f64,
    pub phi: f64,
    pub chi: f64,
    pub d_eta: Vec<f64>,
    pub d_phi: Vec<f64>,
    pub d_chi: Vec<f64>,
}

impl<W: Waveform> PiPulseEngine<W> {
    pub fn new(field: W, psd: &PowerSpectralDensity, sensing_time: f64) -> Self {
        Self { field, kernel: DecoherenceKernel::new(psd, sensing_time) }
    }

    pub fn field(&self) -> &W {
        &self.field
    }

    pub fn sensing_time(&self) -> f64 {
        self.kernel.sensing_time
    }

    pub fn kernel(&self) -> &DecoherenceKernel {
        &self.kernel
    }

    pub fn phase_of(&self, flips: &[f64]) -> f64 {
        phase_of(flips, self.kernel.sensing_time, &self.field)
    }

    pub fn chi_of(&self, flips: &[f64]) -> f64 {
        self.kernel.chi_of(flips)
    }

    pub fn eta_of(&self, flips: &[f64]) -> Result<f64> {
        eta_from(self.chi_of(flips), self.phase_of(flips), self.kernel.sensing_time)
    }

    pub fn sensitivity(&self, protocol: &PiPulseProtocol) -> Result<f64> {
        self.eta_of(&protocol.pulse_times)
    }

    /// Central differences with step `h` on each flip, others held fixed.
    pub fn gradient_with_step(&self, flips: &[f64], h: f64) -> Result<SensitivityGradient> {
        let phi = self.phase_of(flips);
        let chi = self.chi_of(flips);
        let eta = eta_from(chi, phi, self.kernel.sensing_time)?;
        let d_chi = self.kernel.chi_differences(flips, h);
        let mut moved = flips.to_vec();
        let d_phi: Vec<f64> = (0..flips.len())
            .map(|j| {
                moved[j] = flips[j] + h;
                let plus = self.phase_of(&moved);
                moved[j] = flips[j] - h;
                let minus = self.phase_of(&moved);
                moved[j] = flips[j];
                (plus - minus) / (2.0 * h)
            })
            .collect();
        // η = e^χ √T / |φ|, differentiated through the perturbed χ± and φ±
        let root_t = self.kernel.sensing_time.sqrt();
        let d_eta = d_chi
            .iter()
            .zip(&d_phi)
            .map(|(&dc, &dp)| {
                let (cp, cm) = (chi + dc * h, chi - dc * h);
                let (pp, pm) = (phi + dp * h, phi - dp * h);
                (cp.exp() * root_t / pp.abs() - cm.exp() * root_t / pm.abs()) / (2.0 * h)
            })
            .collect();
        Ok(SensitivityGradient { eta, phi, chi, d_eta, d_phi, d_chi })
    }

    pub fn gradient(&self, flips: &[f64]) -> Result<SensitivityGradient> {
        self.gradient_with_step(flips, COLLISION_GAP)
    }
}

/// `η = e^{χ(T)} √T / |φ(T)|` in μT·s^{1/2}.
pub fn pi_sensitivity<W: Waveform>(protocol: &PiPulseProtocol, field: &W, psd: &PowerSpectralDensity) -> Result<f64> {
    PiPulseEngine::new(field, psd, protocol.sensing_time).sensitivity(protocol)
}

/// `dη/dt_j` by central differences with a 1 ns step.
pub fn pi_sensitivity_gradient<W: Waveform>(
    protocol: &PiPulseProtocol,
    field: &W,
    psd: &PowerSpectralDensity,
) -> Result<Vec<f64>> {
    Ok(PiPulseEngine::new(field, psd, protocol.sensing_time)
        .gradient(&protocol.pulse_times)?
        .d_eta)
}

/// Sort flip times, clamp them into `[lo, hi]`, and annihilate neighbors closer
/// than `min_gap` in pairs. Returns the settled times and, for each, the index
/// it came from.
pub fn settle_times(times: &[f64], lo: f64, hi: f64, min_gap: f64) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<(f64, usize)> = times.iter().map(|&t| t.clamp(lo, hi)).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<(f64, usize)> = Vec::with_capacity(order.len());
    let mut i = 0;
    while i < order.len() {
        if i + 1 < order.len() && order[i + 1].0 - order[i].0 < min_gap {
            i += 2;
        } else {
            kept.push(order[i]);
            i += 1;
        }
    }
    kept.into_iter().unzip()
}

/// Optimizer view of π-pulse timing: parameters are pulse times in μs and the
/// loss is η in μT·μs^{1/2}, which keeps gradients of order one.
#[derive(Debug, Clone)]
pub struct PiPulseObjective<W> {
    engine: PiPulseEngine<W>,
}

/// η in μT·μs^{1/2} per η in μT·s^{1/2}.
pub(crate) const LOSS_SCALE: f64 = 1e3;

impl<W: Waveform> PiPulseObjective<W> {
    pub fn new(engine: PiPulseEngine<W>) -> Self {
        Self { engine }
    }

    pub fn engine(&self) -> &PiPulseEngine<W> {
        &self.engine
    }

    pub fn initial_parameters(protocol: &PiPulseProtocol) -> Vec<f64> {
        protocol.pulse_times.iter().map(|t| t / MICROSECOND).collect()
    }

    pub fn protocol(&self, theta: &[f64]) -> Result<PiPulseProtocol> {
        PiPulseProtocol::new(theta.iter().map(|t| t * MICROSECOND).collect(), self.engine.sensing_time())
    }
}

impl<W: Waveform> Objective for PiPulseObjective<W> {
    fn evaluate(&mut self, theta: &[f64], _rng: &mut rand_chacha::ChaCha8Rng) -> Result<Evaluation> {
        let flips: Vec<f64> = theta.iter().map(|t| t * MICROSECOND).collect();
        let g = self.engine.gradient(&flips)?;
        Ok(Evaluation {
            loss: g.eta * LOSS_SCALE,
            eta: g.eta,
            gradient: g.d_eta.iter().map(|d| d * LOSS_SCALE * MICROSECOND).collect(),
            minibatch: Vec::new(),
        })
    }

    fn project(&self, theta: Vec<f64>) -> Projection {
        let t_us = self.engine.sensing_time() / MICROSECOND;
        let gap = COLLISION_GAP / MICROSECOND;
        let (theta, kept) = settle_times(&theta, gap, t_us - gap, gap);
        Projection { theta, kept }
    }
}

/// Optimizes the timings of `n_pulses` π pulses from a Carr-Purcell start.
pub fn optimize_pi<W: Waveform>(
    field: W,
    psd: &PowerSpectralDensity,
    sensing_time: f64,
    n_pulses: usize,
    settings: &SgdSettings,
) -> std::result::Result<RunRecord, SgdFailure> {
    let start = PiPulseProtocol::carr_purcell(n_pulses, sensing_time)
        .map_err(|error| SgdFailure::before_start(error, settings))?;
    let mut objective = PiPulseObjective::new(PiPulseEngine::new(field, psd, sensing_time));
    run_sgd(&mut objective, PiPulseObjective::<W>::initial_parameters(&start), settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{MultiToneField, Tone};
    use proptest::prelude::*;

    const T: f64 = 50e-6;

    fn tone(nu: f64) -> MultiToneField {
        MultiToneField::new(vec![Tone { weight: 1.0, frequency_hz: nu, phase: 0.0 }]).unwrap()
    }

    struct Silent;
    impl Waveform for Silent {
        fn value(&self, _: f64) -> f64 {
            0.0
        }
        fn integral(&self, _: f64, _: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn switching_function_examples() {
        let free = PiPulseProtocol::free(T).unwrap();
        assert!([0.0, 1e-6, T].iter().all(|&t| switching_function(&free, t) == 1.0));
        let one = PiPulseProtocol::new(vec![T / 2.0], T).unwrap();
        assert_eq!(switching_function(&one, 0.2 * T), 1.0);
        assert_eq!(switching_function(&one, 0.7 * T), -1.0);
        let cp = PiPulseProtocol::carr_purcell(50, T).unwrap();
        assert_eq!(switching_function(&cp, T), 1.0);
    }

    #[test]
    fn protocol_validation() {
        assert!(PiPulseProtocol::new(vec![0.0], T).is_err());
        assert!(PiPulseProtocol::new(vec![T], T).is_err());
        assert!(PiPulseProtocol::new(vec![2e-6, 1e-6], T).is_err());
        let p = PiPulseProtocol::new(vec![10e-6, 30e-6, 60e-6], 100e-6).unwrap();
        let g = p.gaps();
        assert!((g[0] - 10e-6).abs() < 1e-18 && (g[1] - 20e-6).abs() < 1e-18 && (g[2] - 30e-6).abs() < 1e-18);
        let back = PiPulseProtocol::from_gaps(&g, 100e-6).unwrap();
        assert!(back.pulse_times().iter().zip(p.pulse_times()).all(|(a, b)| (a - b).abs() < 1e-18));
    }

    #[test]
    fn free_phase_single_tone() {
        let nu = 77e3;
        let phi = accumulated_phase(&PiPulseProtocol::free(T).unwrap(), &tone(nu));
        let expect = GYROMAGNETIC_RATIO * (2.0 * PI * nu * T).sin() / (2.0 * PI * nu);
        assert!((phi - expect).abs() < 1e-9 * expect.abs());
    }

    #[test]
    fn silent_field_has_zero_phase_and_is_blind() {
        let p = PiPulseProtocol::carr_purcell(4, T).unwrap();
        assert_eq!(accumulated_phase(&p, &Silent), 0.0);
        let err = pi_sensitivity(&p, &Silent, &PowerSpectralDensity::nv_bath()).unwrap_err();
        assert!(matches!(err, Error::BlindProtocol));
    }

    #[test]
    fn free_filter_function_closed_form() {
        let p = PiPulseProtocol::free(T).unwrap();
        assert!((filter_function(&p, 0.0) - T * T).abs() < 1e-24);
        for w in [1e3, 7.7e4, 2.5e6] {
            let expect = 4.0 * (w * T / 2.0).sin().powi(2) / (w * w);
            assert!((filter_function(&p, w) - expect).abs() < 1e-12 * T * T);
        }
    }

    #[test]
    fn centered_pulse_has_no_dc_response() {
        let p = PiPulseProtocol::new(vec![T / 2.0], T).unwrap();
        assert!(filter_function(&p, 0.0) < 1e-30);
    }

    #[test]
    fn silent_bath_gives_zero_chi() {
        let p = PiPulseProtocol::carr_purcell(6, T).unwrap();
        assert_eq!(decoherence_chi(&p, &PowerSpectralDensity::silent()), 0.0);
    }

    #[test]
    fn chi_matches_independent_quadrature() {
        // frozen from an mpmath quadrature of S(ω)·4sin²(ωT/2)/ω² and, for the
        // CP case, a time-domain double integral of the bath autocovariance
        let psd = PowerSpectralDensity::nv_bath();
        let free = decoherence_chi(&PiPulseProtocol::free(T).unwrap(), &psd);
        assert!((free / 0.362661100355717 - 1.0).abs() < 5e-3, "{free}");
        let cp4 = decoherence_chi(&PiPulseProtocol::carr_purcell(4, T).unwrap(), &psd);
        assert!((cp4 / 0.911844688747032 - 1.0).abs() < 5e-3, "{cp4}");
    }

    #[test]
    fn chi_time_reversal_invariant() {
        let psd = PowerSpectralDensity::nv_bath();
        let p = PiPulseProtocol::new(vec![3e-6, 11e-6, 12.5e-6, 30e-6, 41e-6], T).unwrap();
        let a = decoherence_chi(&p, &psd);
        let b = decoherence_chi(&p.reversed(), &psd);
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn noiseless_limit() {
        let field = MultiToneField::comparison_target();
        let p = PiPulseProtocol::carr_purcell(8, T).unwrap();
        let engine = PiPulseEngine::new(&field, &PowerSpectralDensity::white(1e-30).unwrap(), T);
        let eta = engine.sensitivity(&p).unwrap();
        let phi = accumulated_phase(&p, &field);
        assert!((eta - T.sqrt() / phi.abs()).abs() < 1e-12 * eta);
    }

    #[test]
    fn phase_gradient_matches_flip_derivative() {
        let field = MultiToneField::comparison_target();
        let p = PiPulseProtocol::new(vec![4e-6, 9e-6, 17e-6, 26e-6, 38e-6], T).unwrap();
        let engine = PiPulseEngine::new(&field, &PowerSpectralDensity::nv_bath(), T);
        let g = engine.gradient(p.pulse_times()).unwrap();
        for (j, &t) in p.pulse_times().iter().enumerate() {
            let before = if j % 2 == 0 { 1.0 } else { -1.0 };
            let analytic = 2.0 * GYROMAGNETIC_RATIO * field.value(t) * before;
            assert!((g.d_phi[j] - analytic).abs() < 1e-4 * analytic.abs(), "{j}: {} vs {analytic}", g.d_phi[j]);
        }
    }

    #[test]
    fn incremental_chi_differences_match_full_recomputation() {
        let psd = PowerSpectralDensity::nv_bath();
        let kernel = DecoherenceKernel::new(&psd, T);
        let flips = vec![4e-6, 9e-6, 17e-6, 26e-6, 38e-6];
        let h = 1e-9;
        let fast = kernel.chi_differences(&flips, h);
        for j in 0..flips.len() {
            let mut m = flips.clone();
            m[j] += h;
            let p = kernel.chi_of(&m);
            m[j] -= 2.0 * h;
            let q = kernel.chi_of(&m);
            let slow = (p - q) / (2.0 * h);
            assert!((fast[j] - slow).abs() < 1e-6 * slow.abs().max(1.0), "{j}: {} vs {slow}", fast[j]);
        }
    }

    #[test]
    fn gradient_antisymmetric_for_mirror_symmetric_setup() {
        // f symmetric about T/2: cos(2πν(t - T/2)) with ν·T integer
        let nu = 4.0 / T;
        let field = MultiToneField::new(vec![Tone { weight: 1.0, frequency_hz: nu, phase: -PI * nu * T }]).unwrap();
        let p = PiPulseProtocol::new(vec![5e-6, 12e-6, 20e-6, 30e-6, 38e-6, 45e-6], T).unwrap();
        let g = PiPulseEngine::new(&field, &PowerSpectralDensity::nv_bath(), T).gradient(p.pulse_times()).unwrap();
        let n = g.d_eta.len();
        for j in 0..n {
            let (a, b) = (g.d_eta[j], g.d_eta[n - 1 - j]);
            assert!((a + b).abs() < 1e-5 * a.abs().max(b.abs()), "{j}: {a} {b}");
        }
    }

    #[test]
    fn central_difference_is_second_order() {
        let field = MultiToneField::comparison_target();
        let engine = PiPulseEngine::new(&field, &PowerSpectralDensity::nv_bath(), T);
        let flips = [6e-6, 19e-6, 33e-6];
        let g1 = engine.gradient_with_step(&flips, 4e-9).unwrap().d_eta;
        let g2 = engine.gradient_with_step(&flips, 2e-9).unwrap().d_eta;
        let g4 = engine.gradient_with_step(&flips, 1e-9).unwrap().d_eta;
        for j in 0..3 {
            let coarse = (g1[j] - g2[j]).abs();
            let fine = (g2[j] - g4[j]).abs();
            // error ratio ~4 for an O(h²) scheme; allow roundoff at tiny differences
            assert!(fine <= coarse / 2.0 || fine < 1e-7 * g4[j].abs(), "{j}: {coarse} {fine}");
        }
    }

    #[test]
    fn settle_clamps_and_annihilates() {
        let (t, kept) = settle_times(&[5.0, 1.0, 1.0005, -3.0, 12.0], 0.001, 9.999, 0.001);
        assert_eq!(kept, vec![3, 0, 4]);
        assert_eq!(t, vec![0.001, 5.0, 9.999]);
        let (t, _) = settle_times(&[-1.0, -2.0], 0.001, 9.999, 0.001);
        assert!(t.is_empty());
    }

    fn from_weights(w: &[f64]) -> PiPulseProtocol {
        let total: f64 = w.iter().sum();
        let gaps: Vec<f64> = w[..w.len() - 1].iter().map(|x| x / total * T).collect();
        PiPulseProtocol::from_gaps(&gaps, T).unwrap()
    }

    /// `(1/π)∫₀^∞ |y(ω)|² dω` by trapezoid up to 20 MHz plus the `1/ω²` tail.
    fn parseval_integral(p: &PiPulseProtocol) -> f64 {
        let d = 2.0 * PI / (20.0 * T);
        let n = 20_000;
        let body: f64 = (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * filter_function(p, k as f64 * d)
            })
            .sum::<f64>()
            * d;
        let cutoff = n as f64 * d;
        (body + (2.0 + 4.0 * p.len() as f64) / cutoff) / PI
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn white_chi_is_half_s0_t(w in proptest::collection::vec(0.05..1.0f64, 1..=21), c in prop::sample::select(vec![0.1, 0.5, 1.0])) {
            let p = from_weights(&w);
            let chi = decoherence_chi(&p, &PowerSpectralDensity::white(2.0 * c / T).unwrap());
            prop_assert!((chi / c - 1.0).abs() < 5e-3, "{} vs {}", chi, c);
        }

        #[test]
        fn filter_parseval(w in proptest::collection::vec(0.05..1.0f64, 1..=21)) {
            let p = from_weights(&w);
            let total = parseval_integral(&p);
            prop_assert!((total / T - 1.0).abs() < 1e-2, "{} vs {}", total, T);
        }
    }
}
