//! Bath noise: a Gaussian-mixture power spectral density over a white floor,
//! and stationary Gaussian time traces synthesized from it.
//!
//! Conventions: angular frequencies in s⁻¹, spectral density in s⁻¹, and the
//! spectrum is extended evenly, `S(-ω) = S(ω)`. A trace ξ(t) has
//! autocovariance `C(τ) = (1/2π) ∫ S(ω) e^{iωτ} dω`, so that a white spectrum
//! `S₀` dephases a free qubit as `exp(-S₀T/2)`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest angular frequency synthesized or integrated unless a peak demands more.
pub const DEFAULT_OMEGA_MAX: f64 = 8.0e6;

/// Peaks are integrated out to this many standard deviations past their center.
const PEAK_REACH_SIGMAS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPeak {
    pub height: f64,
    pub center: f64,
    pub sigma: f64,
}

impl GaussianPeak {
    #[inline]
    fn at(&self, omega_abs: f64) -> f64 {
        let z = (omega_abs - self.center) / self.sigma;
        self.height * (-0.5 * z * z).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectralDensity {
    floor: f64,
    peaks: Vec<GaussianPeak>,
}

impl PowerSpectralDensity {
    pub fn new(floor: f64, peaks: Vec<GaussianPeak>) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::invalid("psd.floor", format!("must be positive, got {floor}")));
        }
        for p in &peaks {
            if !(p.height > 0.0 && p.height.is_finite()) {
                return Err(Error::invalid("psd.components", format!("height must be positive, got {}", p.height)));
            }
            if !(p.sigma > 0.0 && p.sigma.is_finite()) {
                return Err(Error::invalid("psd.components", format!("sigma must be positive, got {}", p.sigma)));
            }
            if !(p.center >= 0.0 && p.center.is_finite()) {
                return Err(Error::invalid("psd.components", format!("center must be non-negative, got {}", p.center)));
            }
        }
        Ok(Self { floor, peaks })
    }

    /// Constant spectrum `S₀`.
    pub fn white(s0: f64) -> Result<Self> {
        Self::new(s0, Vec::new())
    }

    /// Carbon-13 bath of a shallow NV center: five Gaussians over a 12170 s⁻¹ floor.
    pub fn nv_bath() -> Self {
        let peak = |height, center, sigma| GaussianPeak { height, center, sigma };
        Self {
            floor: 12170.0,
            peaks: vec![
                peak(8.0e4, 4.407e5, 1.0e4),
                peak(2.1377e5, 6.98e5, 1.0e4),
                peak(2.6971e6, 2.6595e6, 1.2376e5),
                peak(5.6288e5, 2.9353e6, 8.7174e4),
                peak(1.8577e5, 4.4818e6, 4.3784e5),
            ],
        }
    }

    /// Spectrum that is identically zero. Violates the positive-floor invariant
    /// and exists only to exercise degenerate paths in tests.
    #[doc(hidden)]
    pub fn silent() -> Self {
        Self { floor: 0.0, peaks: Vec::new() }
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn peaks(&self) -> &[GaussianPeak] {
        &self.peaks
    }

    /// `S(ω) = floor + Σ h·exp(-(|ω|-c)²/2σ²)`.
    pub fn evaluate(&self, omega: f64) -> f64 {
        self.floor + self.peak_part(omega)
    }

    /// `S(ω) - floor`.
    pub fn peak_part(&self, omega: f64) -> f64 {
        let w = omega.abs();
        self.peaks.iter().map(|p| p.at(w)).sum()
    }

    /// Frequency past which every peak has decayed by eight standard deviations,
    /// and never less than [`DEFAULT_OMEGA_MAX`].
    pub fn reach(&self) -> f64 {
        self.peaks
            .iter()
            .map(|p| p.center + PEAK_REACH_SIGMAS * p.sigma)
            .fold(DEFAULT_OMEGA_MAX, f64::max)
    }

    pub fn narrowest_sigma(&self) -> Option<f64> {
        self.peaks.iter().map(|p| p.sigma).reduce(f64::min)
    }

    /// `(1/2π) ∫_{-W}^{W} S(ω) dω` by composite Simpson quadrature; the noise
    /// variance of a trace band-limited to `W`.
    pub fn band_power(&self, omega_max: f64) -> f64 {
        let step = self
            .narrowest_sigma()
            .map_or(omega_max, |s| s / 16.0)
            .min(omega_max / 64.0);
        let mut n = (omega_max / step).ceil() as usize;
        n += n % 2;
        let h = omega_max / n as f64;
        let mut acc = self.peak_part(0.0) + self.peak_part(omega_max);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * self.peak_part(i as f64 * h);
        }
        let peaks = acc * h / 3.0;
        (self.floor * omega_max + peaks) / PI
    }
}

impl Default for PowerSpectralDensity {
    fn default() -> Self {
        Self::nv_bath()
    }
}

/// Noise samples `ξ(t_k)` at `t_k = k·dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrace {
    pub samples: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
}

impl NoiseTrace {
    pub fn zeros(len: usize, dt: f64) -> Self {
        Self { samples: vec![0.0; len], dt, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Frequency lattice used for synthesis. The lattice spacing is `2π/(4T)`,
/// i.e. the sensing window zero-padded four times, so the synthesized process
/// is periodic in `4T` and one inverse FFT of length `4·n` yields the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisGrid {
    pub dt: f64,
    pub n_samples: usize,
    pub fft_len: usize,
    pub d_omega: f64,
    /// Number of lattice frequencies, DC included.
    pub n_freq: usize,
}

impl SynthesisGrid {
    pub fn new(sensing_time: f64, dt: f64, omega_reach: f64) -> Result<Self> {
        if !(sensing_time > 0.0 && sensing_time.is_finite()) {
            return Err(Error::invalid("sensing_time", format!("must be positive, got {sensing_time}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        let ratio = sensing_time / dt;
        if ratio < 2.0 {
            return Err(Error::invalid("dt", format!("sensing window holds {ratio} steps, need at least 2")));
        }
        // tolerate representation error in T/dt
        let n_samples = (ratio - 1e-9).ceil() as usize;
        let fft_len = 4 * n_samples;
        let d_omega = 2.0 * PI / (fft_len as f64 * dt);
        let omega_max = (PI / dt).min(omega_reach);
        let n_freq = ((omega_max / d_omega).floor() as usize + 1).min(fft_len / 2);
        Ok(Self { dt, n_samples, fft_len, d_omega, n_freq })
    }

    pub fn omega(&self, j: usize) -> f64 {
        j as f64 * self.d_omega
    }
}

/// Draws stationary Gaussian traces for one spectrum and window.
///
/// ξ(t) = Σ_j a_j cos(ω_j t) + b_j sin(ω_j t) with a_j, b_j ~ N(0, v_j),
/// v_j = S(ω_j)·Δω/π (half weight at ω = 0).
pub struct NoiseSynthesizer {
    grid: SynthesisGrid,
    std_devs: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for NoiseSynthesizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoiseSynthesizer").field("grid", &self.grid).finish()
    }
}

impl NoiseSynthesizer {
    pub fn new(psd: &PowerSpectralDensity, sensing_time: f64, dt: f64) -> Result<Self> {
        let grid = SynthesisGrid::new(sensing_time, dt, psd.reach())?;
        let std_devs = (0..grid.n_freq)
            .map(|j| {
                let weight = if j == 0 { 0.5 } else { 1.0 };
                (weight * psd.evaluate(grid.omega(j)) * grid.d_omega / PI).sqrt()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_inverse(grid.fft_len);
        Ok(Self { grid, std_devs, fft })
    }

    pub fn grid(&self) -> &SynthesisGrid {
        &self.grid
    }

    pub fn trace(&self, seed: u64) -> NoiseTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); self.grid.fft_len];
        for (slot, &sd) in spectrum.iter_mut().zip(&self.std_devs) {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            // Re[(a - ib) e^{iωt}] = a cos ωt + b sin ωt
            *slot = Complex64::new(a * sd, -b * sd);
        }
        self.fft.process(&mut spectrum);
        NoiseTrace {
            samples: spectrum[..self.grid.n_samples].iter().map(|z| z.re).collect(),
            dt: self.grid.dt,
            seed,
        }
    }
}

/// Synthesize one trace covering `[0, T]` with step `dt`.
pub fn sample_noise_trace(psd: &PowerSpectralDensity, sensing_time: f64, dt: f64, seed: u64) -> Result<NoiseTrace> {
    Ok(NoiseSynthesizer::new(psd, sensing_time, dt)?.trace(seed))
}

/// Per-trace seed derived from the pool seed, independent of scheduling.
pub fn trace_seed(master_seed: u64, index: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(index as u64 ^ 0xA5A5_5A5A_C3C3_3C3C))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const DEFAULT_POOL_SIZE: usize = 20_000;
pub const DEFAULT_MINIBATCH: usize = 100;

/// Pre-generated noise configurations reused across optimizer iterations.
#[derive(Debug, Clone)]
pub struct NoisePool {
    traces: Vec<NoiseTrace>,
    minibatch_size: usize,
    master_seed: u64,
}

impl NoisePool {
    pub fn build(
        psd: &PowerSpectralDensity,
        sensing_time: f64,
        dt: f64,
        size: usize,
        minibatch_size: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("pool_size", "noise pool is empty"));
        }
        let synth = NoiseSynthesizer::new(psd, sensing_time, dt)?;
        let traces = (0..size)
            .into_par_iter()
            .map(|i| synth.trace(trace_seed(master_seed, i)))
            .collect();
        Self::from_traces(traces, minibatch_size, master_seed)
    }

    pub fn from_traces(traces: Vec<NoiseTrace>, minibatch_size: usize, master_seed: u64) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::invalid("pool_size", "noise pool is empty"));
        }
        if minibatch_size == 0 || minibatch_size > traces.len() {
            return Err(Error::invalid(
                "minibatch",
                format!("must be in 1..={}, got {minibatch_size}", traces.len()),
            ));
        }
        let (len, dt) = (traces[0].len(), traces[0].dt);
        if let Some(bad) = traces.iter().find(|t| t.len() != len) {
            return Err(Error::Mismatch { what: "pool trace length", expected: len, actual: bad.len() });
        }
        if traces.iter().any(|t| t.dt != dt) {
            return Err(Error::invalid("dt", "pool traces must share one time step"));
        }
        Ok(Self { traces, minibatch_size, master_seed })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn minibatch_size(&self) -> usize {
        self.minibatch_size
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn dt(&self) -> f64 {
        self.traces[0].dt
    }

    pub fn trace(&self, index: usize) -> &NoiseTrace {
        &self.traces[index]
    }

    pub fn traces(&self) -> &[NoiseTrace] {
        &self.traces
    }

    /// Uniform draw with replacement.
    pub fn draw_minibatch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        (0..self.minibatch_size)
            .map(|_| rng.random_range(0..self.traces.len()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_from_peaks_is_floor() {
        let psd = PowerSpectralDensity::nv_bath();
        assert_eq!(psd.evaluate(1.0e8), 12170.0);
    }

    #[test]
    fn largest_peak_value() {
        // direct evaluation of the table at the third center
        let psd = PowerSpectralDensity::nv_bath();
        let v = psd.evaluate(2.6595e6);
        assert!((v - 2713076.7583352067).abs() < 1e-6, "{v}");
        assert!(v > 12170.0 + 2.6971e6);
    }

    #[test]
    fn even_extension() {
        let psd = PowerSpectralDensity::nv_bath();
        for w in [0.0, 3.3e5, 2.7e6, 9.9e6] {
            assert_eq!(psd.evaluate(w), psd.evaluate(-w));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(PowerSpectralDensity::new(0.0, vec![]).is_err());
        let bad = GaussianPeak { height: 1.0, center: -1.0, sigma: 1.0 };
        assert!(PowerSpectralDensity::new(1.0, vec![bad]).is_err());
        let bad = GaussianPeak { height: 1.0, center: 1.0, sigma: 0.0 };
        assert!(PowerSpectralDensity::new(1.0, vec![bad]).is_err());
    }

    #[test]
    fn silent_spectrum_gives_zero_trace() {
        let tr = sample_noise_trace(&PowerSpectralDensity::silent(), 50e-6, 50e-9, 7).unwrap();
        assert_eq!(tr.len(), 1000);
        assert!(tr.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn trace_length_is_ceiling() {
        let psd = PowerSpectralDensity::white(1.0).unwrap();
        assert_eq!(sample_noise_trace(&psd, 1.01e-6, 0.1e-6, 0).unwrap().len(), 11);
        assert_eq!(sample_noise_trace(&psd, 1.0e-6, 0.1e-6, 0).unwrap().len(), 10);
        assert!(sample_noise_trace(&psd, 1.0e-6, 0.6e-6, 0).is_err());
        assert!(sample_noise_trace(&psd, -1.0, 0.1, 0).is_err());
    }

    #[test]
    fn grid_defaults_for_fifty_microseconds() {
        let g = SynthesisGrid::new(50e-6, 50e-9, DEFAULT_OMEGA_MAX).unwrap();
        assert_eq!(g.n_samples, 1000);
        assert_eq!(g.fft_len, 4000);
        assert!((g.d_omega - 2.0 * PI / 200e-6).abs() < 1e-9);
        assert_eq!(g.n_freq, 255);
    }

    #[test]
    fn single_trace_pool_always_draws_zero() {
        let pool = NoisePool::from_traces(vec![NoiseTrace::zeros(4, 1.0)], 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(pool.draw_minibatch(&mut rng), vec![0]);
        }
    }

    #[test]
    fn pool_rejects_oversized_minibatch() {
        let traces = vec![NoiseTrace::zeros(4, 1.0); 3];
        assert!(NoisePool::from_traces(traces, 4, 0).is_err());
        assert!(NoisePool::from_traces(vec![], 1, 0).is_err());
    }

    #[test]
    fn pools_are_reproducible() {
        let psd = PowerSpectralDensity::nv_bath();
        let a = NoisePool::build(&psd, 10e-6, 50e-9, 16, 4, 99).unwrap();
        let b = NoisePool::build(&psd, 10e-6, 50e-9, 16, 4, 99).unwrap();
        let c = NoisePool::build(&psd, 10e-6, 50e-9, 16, 4, 100).unwrap();
        assert_eq!(a.traces(), b.traces());
        assert_ne!(a.traces(), c.traces());
    }

    #[test]
    fn band_power_of_white_spectrum() {
        let psd = PowerSpectralDensity::white(3.0).unwrap();
        assert!((psd.band_power(1e6) - 3.0 * 1e6 / PI).abs() < 1e-6);
    }
}
