//! Optimal-control workbench for single-qubit quantum sensing under colored noise.
//!
//! The crate models an NV-center style qubit measuring the amplitude `b` of a
//! known waveform `f(t)` while a Gaussian bath with spectrum `S(ω)` dephases it.
//! Three protocol families are optimized by Adadelta to minimize the
//! sensitivity `η`:
//!
//! * instantaneous π-pulse timings ([`pulses`]),
//! * a continuous in-plane drive discretized in 50 ns steps ([`drive`]),
//! * pump switch times of a photocurrent pump-probe experiment ([`pump`]).
//!
//! Optimization trajectories can be analysed as spin-glass aging data with
//! [`glass`]. The [`cli`] module drives everything from TOML run configs.
//!
//! Units are SI throughout the public API (seconds, rad/s) except the target
//! amplitude, which is in μT, so sensitivities come out in μT·s^{1/2}.

pub mod cli;
pub mod config;
pub mod drive;
pub mod error;
pub mod field;
pub mod glass;
pub mod noise;
pub mod optimizer;
pub mod pulses;
pub mod pump;
pub mod su2;


pub use drive::{ContinuousDriveEngine, ContinuousProtocol, QubitState};
pub use glass::{fit_growth, two_time_autocorr, GrowthFit, ProtocolTrajectory, SpinVector};
pub use error::{Error, Result};
pub use field::{MultiToneField, PhotocurrentField, Tone, Waveform};

pub use noise::{NoisePool, NoiseTrace, PowerSpectralDensity};
pub use optimizer::{run_sgd, Adadelta, Objective, RunRecord, SgdSettings};
pub use pulses::{PiPulseEngine, PiPulseProtocol};
pub use pump::PumpProbeConfig;


/// Electron gyromagnetic ratio, rad s⁻¹ μT⁻¹.
pub const GYROMAGNETIC_RATIO: f64 = 2.0 * std::f64::consts::PI * 2.81e4;

pub const MICROSECOND: f64 = 1e-6;
pub const NANOSECOND: f64 = 1e-9;
