//! Aging diagnostics for optimization trajectories.
//!
//! A protocol is read as a vector of effective spins `σ`; the two-time
//! autocorrelation `Δ(n_w, n_w + n) = (1/N) Σ_i (σ_i(n_w) - σ_i(n_w + n))²`
//! measures how far the optimizer wanders after waiting `n_w` iterations. Its
//! growth is fitted both as a power law and as a logarithm of `n`.

use serde::{Deserialize, Serialize};

use crate::drive::ContinuousProtocol;
use crate::error::{Error, Result};
use crate::optimizer::RunRecord;
use crate::pulses::PiPulseProtocol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinKind {
    PiGaps,
    ContinuousPhases,
    PumpTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinVector {
    pub kind: SpinKind,
    pub components: Vec<f64>,
}

impl SpinVector {
    pub fn from_pi(protocol: &PiPulseProtocol) -> Self {
        Self { kind: SpinKind::PiGaps, components: protocol.gaps() }
    }

    /// `(Φ_x(0), Φ_y(0), Φ_x(Δt), Φ_y(Δt), ...)`.
    pub fn from_continuous(protocol: &ContinuousProtocol) -> Self {
        Self { kind: SpinKind::ContinuousPhases, components: protocol.interleaved() }
    }

    pub fn from_pump(switch_times: &[f64]) -> Self {
        Self { kind: SpinKind::PumpTimings, components: switch_times.to_vec() }
    }

    /// Spin vector of a raw optimizer parameter snapshot of the given family.
    pub fn from_parameters(kind: SpinKind, theta: &[f64]) -> Self {
        let components = match kind {
            SpinKind::PiGaps => {
                let mut prev = 0.0;
                theta
                    .iter()
                    .map(|&t| {
                        let g = t - prev;
                        prev = t;
                        g
                    })
                    .collect()
            }
            SpinKind::ContinuousPhases | SpinKind::PumpTimings => theta.to_vec(),
        };
        Self { kind, components }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Spin-vector snapshots of one run, keyed by iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTrajectory {
    pub kind: SpinKind,
    pub iterations: Vec<usize>,
    pub snapshots: Vec<Vec<f64>>,
}

impl ProtocolTrajectory {
    pub fn new(kind: SpinKind, iterations: Vec<usize>, snapshots: Vec<Vec<f64>>) -> Result<Self> {
        if iterations.len() != snapshots.len() {
            return Err(Error::Mismatch { what: "snapshots", expected: iterations.len(), actual: snapshots.len() });
        }
        if iterations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("iterations", "snapshot iterations must be strictly increasing"));
        }
        Ok(Self { kind, iterations, snapshots })
    }

    /// Dense trajectory with snapshot `n` at iteration `n`.
    pub fn dense(kind: SpinKind, snapshots: Vec<Vec<f64>>) -> Self {
        Self { kind, iterations: (0..snapshots.len()).collect(), snapshots }
    }

    pub fn from_record(record: &RunRecord, kind: SpinKind) -> Self {
        Self {
            kind,
            iterations: record.snapshots.iter().map(|s| s.iteration).collect(),
            snapshots: record
                .snapshots
                .iter()
                .map(|s| SpinVector::from_parameters(kind, &s.theta).components)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshot(&self, iteration: usize) -> Result<&[f64]> {
        self.iterations
            .binary_search(&iteration)
            .map(|i| self.snapshots[i].as_slice())
            .map_err(|_| Error::MissingSnapshot(iteration))
    }

    /// Cut at the first snapshot whose dimension differs from the first one.
    pub fn truncated(&self) -> Self {
        let Some(first) = self.snapshots.first() else {
            return self.clone();
        };
        let keep = self.snapshots.iter().position(|s| s.len() != first.len()).unwrap_or(self.snapshots.len());
        if keep < self.snapshots.len() {
            log::info!(
                "trajectory truncated at iteration {}: dimension {} -> {}",
                self.iterations[keep],
                first.len(),
                self.snapshots[keep].len()
            );
        }
        Self {
            kind: self.kind,
            iterations: self.iterations[..keep].to_vec(),
            snapshots: self.snapshots[..keep].to_vec(),
        }
    }
}

/// Mean squared componentwise difference of two equal-length spin vectors.
pub fn spin_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Mismatch { what: "spin vector", expected: a.len(), actual: b.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `Δ(n_w, n_w + n)`.
pub fn two_time_autocorr(trajectory: &ProtocolTrajectory, n_w: usize, n: usize) -> Result<f64> {
    spin_distance(trajectory.snapshot(n_w)?, trajectory.snapshot(n_w + n)?)
}

/// `Δ(n_w, n_w + n)` for every recorded `n ≥ 1` of a truncated trajectory.
pub fn delta_series(trajectory: &ProtocolTrajectory, n_w: usize) -> Result<Vec<(usize, f64)>> {
    let traj = trajectory.truncated();
    let base = traj.snapshot(n_w)?;
    traj.iterations
        .iter()
        .zip(&traj.snapshots)
        .filter(|(&it, _)| it > n_w)
        .map(|(&it, s)| Ok((it - n_w, spin_distance(base, s)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub runs: usize,
}

/// Run-averaged `Δ(n)` with its standard error. Each `n` averages over the
/// runs that reach it.
pub fn ensemble_delta(trajectories: &[ProtocolTrajectory], n_w: usize) -> Result<Vec<DeltaPoint>> {
    let series: Vec<Vec<(usize, f64)>> = trajectories.iter().map(|t| delta_series(t, n_w)).collect::<Result<_>>()?;
    let mut ns: Vec<usize> = series.iter().flatten().map(|p| p.0).collect();
    ns.sort_unstable();
    ns.dedup();
    Ok(ns
        .into_iter()
        .map(|n| {
            let vals: Vec<f64> =
                series.iter().filter_map(|s| s.binary_search_by_key(&n, |p| p.0).ok().map(|i| s[i].1)).collect();
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let stderr = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            DeltaPoint { n, mean, stderr, runs: vals.len() }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preferred {
    PowerLaw,
    Logarithmic,
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub prefactor: f64,
    pub exponent: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub power_law: PowerLawFit,
    pub logarithmic: LogFit,
    pub preferred: Preferred,
    pub points_used: usize,
    /// Points left out of the log-log fit because `Δ ≤ 0`.
    pub nonpositive_excluded: usize,
    /// First `n` of the detected plateau, if any.
    pub plateau_from: Option<f64>,
}

impl GrowthFit {
    /// Compact report `{alpha, log_slope, r2_power, r2_log, preferred}`.
    pub fn report(&self) -> serde_json::Value {
        serde_json::json!({
            "alpha": self.power_law.exponent,
            "log_slope": self.logarithmic.slope,
            "r2_power": self.power_law.r2,
            "r2_log": self.logarithmic.r2,
            "preferred": self.preferred,
        })
    }
}

pub const MIN_FIT_POINTS: usize = 8;
const PLATEAU_WINDOW: usize = 4;
const PLATEAU_TOLERANCE: f64 = 0.01;

/// Ordinary least squares `y = a + b x`; returns `(a, b, R²)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    (intercept, slope, r2)
}

/// Index of the first point whose relative change over the next four points
/// is below 1%, if any.
fn plateau_index(delta: &[f64]) -> Option<usize> {
    (0..delta.len().saturating_sub(PLATEAU_WINDOW)).find(|&i| {
        let (a, b) = (delta[i], delta[i + PLATEAU_WINDOW]);
        b != 0.0 && ((b - a) / b).abs() < PLATEAU_TOLERANCE
    })
}

/// Fits `Δ = A nᵅ` (least squares in log-log) and `Δ = s ln n + c`.
///
/// Points past the onset of a plateau are dropped first; when fewer than
/// eight remain the whole series is fitted and the result is flagged as a
/// plateau.
pub fn fit_growth(n: &[f64], delta: &[f64]) -> Result<GrowthFit> {
    if n.len() != delta.len() {
        return Err(Error::Mismatch { what: "delta series", expected: n.len(), actual: delta.len() });
    }
    if n.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData { needed: MIN_FIT_POINTS, got: n.len() });
    }
    if n.iter().any(|&v| !(v >= 1.0)) {
        return Err(Error::invalid("n", "lag values must be at least 1"));
    }
    let (mut end, mut plateau_from) = (n.len(), None);
    let mut flat = false;
    if let Some(i) = plateau_index(delta) {
        plateau_from = Some(n[i]);
        if i + 1 >= MIN_FIT_POINTS {
            end = i + 1;
        } else {
            flat = true;
        }
    }
    let (n, delta) = (&n[..end], &delta[..end]);
    let ln_n: Vec<f64> = n.iter().map(|v| v.ln()).collect();

    let (lx, ly): (Vec<f64>, Vec<f64>) =
        ln_n.iter().zip(delta).filter(|(_, &d)| d > 0.0).map(|(&x, &d)| (x, d.ln())).unzip();
    let nonpositive_excluded = n.len() - lx.len();
    if nonpositive_excluded > 0 {
        log::warn!("{nonpositive_excluded} non-positive Δ values excluded from the power-law fit");
    }
    let power_law = if lx.len() >= 2 {
        let (a, b, r2) = linear_fit(&lx, &ly);
        PowerLawFit { prefactor: a.exp(), exponent: b, r2 }
    } else {
        PowerLawFit { prefactor: 0.0, exponent: 0.0, r2: 0.0 }
    };
    let (c, s, r2) = linear_fit(&ln_n, delta);
    let logarithmic = LogFit { slope: s, intercept: c, r2 };
    let preferred = if flat {
        Preferred::Plateau
    } else if power_law.r2 >= logarithmic.r2 {
        Preferred::PowerLaw
    } else {
        Preferred::Logarithmic
    };
    Ok(GrowthFit { power_law, logarithmic, preferred, points_used: n.len(), nonpositive_excluded, plateau_from })
}

/// [`fit_growth`] over an ensemble curve.
pub fn fit_ensemble(points: &[DeltaPoint]) -> Result<GrowthFit> {
    let n: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let d: Vec<f64> = points.iter().map(|p| p.mean).collect();
    fit_growth(&n, &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pi_gaps_mapping() {
        let p = PiPulseProtocol::new(vec![10e-6, 30e-6, 60e-6], 100e-6).unwrap();
        let s = SpinVector::from_pi(&p);
        let expect = [10e-6, 20e-6, 30e-6];
        assert!(s.components.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-18));
        assert_eq!(SpinVector::from_parameters(SpinKind::PiGaps, &[10.0, 30.0, 60.0]).components, vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn continuous_mapping_interleaves() {
        let p = ContinuousProtocol::new(vec![0.1, 0.3], vec![0.2, 0.4], 50e-9).unwrap();
        assert_eq!(SpinVector::from_continuous(&p).components, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn empty_protocol_maps_to_empty_vector() {
        assert!(SpinVector::from_pi(&PiPulseProtocol::free(1e-5).unwrap()).is_empty());
    }

    #[test]
    fn zero_lag_and_linear_drift() {
        let c = 0.3;
        let traj = ProtocolTrajectory::dense(
            SpinKind::ContinuousPhases,
            (0..30).map(|n| vec![c * n as f64; 4]).collect(),
        );
        assert_eq!(two_time_autocorr(&traj, 5, 0).unwrap(), 0.0);
        for n in [1, 7, 20] {
            let d = two_time_autocorr(&traj, 5, n).unwrap();
            assert!((d - c * c * (n * n) as f64).abs() < 1e-12);
        }
        assert!(matches!(two_time_autocorr(&traj, 5, 40), Err(Error::MissingSnapshot(45))));
    }

    #[test]
    fn truncates_at_dimension_change() {
        let traj = ProtocolTrajectory::dense(SpinKind::PiGaps, vec![vec![1.0, 2.0], vec![1.0, 2.5], vec![3.0], vec![3.0, 1.0]]);
        assert_eq!(traj.truncated().len(), 2);
        assert_eq!(delta_series(&traj, 0).unwrap().len(), 1);
    }

    #[test]
    fn ensemble_mean_and_stderr() {
        let a = ProtocolTrajectory::dense(SpinKind::PumpTimings, vec![vec![0.0], vec![1.0], vec![2.0]]);
        let b = ProtocolTrajectory::dense(SpinKind::PumpTimings, vec![vec![0.0], vec![3.0]]);
        let e = ensemble_delta(&[a, b], 0).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].mean, e[0].runs), (5.0, 2));
        assert!((e[0].stderr - 4.0).abs() < 1e-12);
        assert_eq!((e[1].mean, e[1].stderr, e[1].runs), (4.0, 0.0, 1));
    }

    #[test]
    fn planted_power_law() {
        let n: Vec<f64> = (1..=60).map(f64::from).collect();
        let d: Vec<f64> = n.iter().map(|v| 3.0 * v.powf(1.6)).collect();
        let fit = fit_growth(&n, &d).unwrap();
        assert!((fit.power_law.exponent - 1.6).abs() < 1e-9);
        assert!((fit.power_law.prefactor - 3.0).abs() < 1e-9);
        assert_eq!(fit.preferred, Preferred::PowerLaw);
    }

    #[test]
    fn planted_logarithm() {
        let n: Vec<f64> = (2..=60).map(f64::from).collect();
        let d: Vec<f64> = n.iter().map(|v| 12.0 * v.ln()).collect();
        let fit = fit_growth(&n, &d).unwrap();
        assert!((fit.logarithmic.slope - 12.0).abs() < 1e-9);
        assert!(fit.logarithmic.intercept.abs() < 1e-9);
        assert_eq!(fit.preferred, Preferred::Logarithmic);
    }

    #[test]
    fn constant_series_is_plateau() {
        let n: Vec<f64> = (1..=20).map(f64::from).collect();
        let fit = fit_growth(&n, &[2.5; 20]).unwrap();
        assert_eq!(fit.preferred, Preferred::Plateau);
        assert!(fit.power_law.exponent.abs() < 1e-12 && fit.logarithmic.slope.abs() < 1e-12);
    }

    #[test]
    fn plateau_tail_is_dropped() {
        let n: Vec<f64> = (1..=200).map(f64::from).collect();
        let d: Vec<f64> = n.iter().map(|&v| if v <= 40.0 { v * v } else { 1600.0 }).collect();
        let fit = fit_growth(&n, &d).unwrap();
        assert!((fit.power_law.exponent - 2.0).abs() < 1e-9, "{fit:?}");
        assert!(fit.points_used <= 41);
    }

    #[test]
    fn nonpositive_points_are_counted() {
        let n: Vec<f64> = (1..=10).map(f64::from).collect();
        let mut d: Vec<f64> = n.iter().map(|v| v * v).collect();
        d[3] = 0.0;
        let fit = fit_growth(&n, &d).unwrap();
        assert_eq!(fit.nonpositive_excluded, 1);
        assert!((fit.power_law.exponent - 2.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(matches!(fit_growth(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::InsufficientData { .. })));
    }

    proptest! {
        #[test]
        fn delta_symmetric_and_permutation_invariant(v in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..30), c in 0.1..10.0f64) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let d = spin_distance(&a, &b).unwrap();
            prop_assert_eq!(d, spin_distance(&b, &a).unwrap());
            let (ra, rb): (Vec<f64>, Vec<f64>) = (a.iter().rev().copied().collect(), b.iter().rev().copied().collect());
            prop_assert!((spin_distance(&ra, &rb).unwrap() - d).abs() <= 1e-12 * d.max(1.0));
            let (sa, sb): (Vec<f64>, Vec<f64>) = (a.iter().map(|x| c * x).collect(), b.iter().map(|x| c * x).collect());
            prop_assert!((spin_distance(&sa, &sb).unwrap() - c * c * d).abs() <= 1e-12 * (c * c * d).max(1e-300));
        }

        #[test]
        fn noisy_planted_exponent_recovered(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: Vec<f64> = (1..=100).map(f64::from).collect();
            let d: Vec<f64> = n.iter().map(|v| 3.0 * v.powf(1.6) * (1.0 + 0.1 * (2.0 * rng.random::<f64>() - 1.0))).collect();
            let fit = fit_growth(&n, &d).unwrap();
            prop_assert!((fit.power_law.exponent / 1.6 - 1.0).abs() < 0.05);
        }
    }
}
