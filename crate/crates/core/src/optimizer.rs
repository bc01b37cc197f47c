//! Adadelta stochastic gradient descent and the recording optimization loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Per-parameter decaying averages `E[g²]` and `E[Δθ²]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adadelta {
    pub momentum: f64,
    pub epsilon: f64,
    pub eg2: Vec<f64>,
    pub edx2: Vec<f64>,
}

impl Adadelta {
    pub fn new(dim: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::invalid("opt.momentum", format!("must lie in (0, 1), got {momentum}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("opt.epsilon", format!("must be positive, got {epsilon}")));
        }
        Ok(Self { momentum, epsilon, eg2: vec![0.0; dim], edx2: vec![0.0; dim] })
    }

    pub fn dim(&self) -> usize {
        self.eg2.len()
    }

    /// One update. Returns `Δθ = -RMS[Δθ]_{t-1} / RMS[g]_t · g`.
    pub fn step(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.dim() {
            return Err(Error::Mismatch { what: "gradient", expected: self.dim(), actual: g.len() });
        }
        let (m, eps) = (self.momentum, self.epsilon);
        let out = g
            .iter()
            .zip(self.eg2.iter_mut().zip(self.edx2.iter_mut()))
            .map(|(&g, (eg2, edx2))| {
                *eg2 = m * *eg2 + (1.0 - m) * g * g;
                let dx = -((*edx2 + eps).sqrt() / (*eg2 + eps).sqrt()) * g;
                *edx2 = m * *edx2 + (1.0 - m) * dx * dx;
                dx
            })
            .collect();
        Ok(out)
    }

    /// Keep only the listed parameter slots, in the given order.
    pub fn retain(&mut self, kept: &[usize]) {
        self.eg2 = kept.iter().map(|&i| self.eg2[i]).collect();
        self.edx2 = kept.iter().map(|&i| self.edx2[i]).collect();
    }
}

/// Loss, reported sensitivity and gradient at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Sensitivity in μT·s^{1/2}.
    pub eta: f64,
    pub gradient: Vec<f64>,
    /// Noise traces used, empty for deterministic objectives.
    pub minibatch: Vec<usize>,
}

/// Feasible parameters after an update; `kept[i]` is the pre-projection slot
/// that became slot `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub theta: Vec<f64>,
    pub kept: Vec<usize>,
}

impl Projection {
    pub fn identity(theta: Vec<f64>) -> Self {
        let kept = (0..theta.len()).collect();
        Self { theta, kept }
    }
}

pub trait Objective {
    fn evaluate(&mut self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<Evaluation>;

    fn project(&self, theta: Vec<f64>) -> Projection {
        Projection::identity(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdSettings {
    pub iterations: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub record_stride: usize,
    pub seed: u64,
}

impl Default for SgdSettings {
    fn default() -> Self {
        Self { iterations: 1000, momentum: DEFAULT_MOMENTUM, epsilon: DEFAULT_EPSILON, record_stride: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub loss: f64,
    pub eta_inverse: f64,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub minibatch: Vec<usize>,
    /// Raw Adadelta step taken from this point, before projection.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub update: Vec<f64>,
    /// Projection slot map applied after `update`; empty when every slot was kept.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kept: Vec<usize>,
}

impl Snapshot {
    /// Slots of `theta + update` that survive into the next snapshot.
    pub fn kept_slots(&self) -> Vec<usize> {
        if self.kept.is_empty() {
            (0..self.update.len()).collect()
        } else {
            self.kept.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub settings: SgdSettings,
    pub snapshots: Vec<Snapshot>,
    pub best_eta: f64,
    pub best_iteration: usize,
}

impl RunRecord {
    pub fn empty(settings: SgdSettings) -> Self {
        Self { settings, snapshots: Vec::new(), best_eta: f64::INFINITY, best_iteration: 0 }
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    pub fn initial_eta_inverse(&self) -> f64 {
        self.snapshots.first().map_or(f64::NAN, |s| s.eta_inverse)
    }

    pub fn best_eta_inverse(&self) -> f64 {
        1.0 / self.best_eta
    }

    /// Copy holding only the parameter trajectory, for compact storage.
    pub fn parameters_only(&self) -> Self {
        let mut r = self.clone();
        for s in &mut r.snapshots {
            s.minibatch.clear();
            s.update.clear();
            s.kept.clear();
        }
        r
    }

    /// `η⁻¹` of the best point seen up to each recorded iteration.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = 0.0f64;
        self.snapshots
            .iter()
            .map(|s| {
                best = best.max(s.eta_inverse);
                best
            })
            .collect()
    }

    /// `η⁻¹` averaged over the final `fraction` of recorded snapshots.
    pub fn tail_eta_inverse(&self, fraction: f64) -> f64 {
        let n = self.snapshots.len();
        let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.snapshots[n - take..];
        tail.iter().map(|s| s.eta_inverse).sum::<f64>() / tail.len() as f64
    }
}

/// A failed run: the error plus everything recorded before it.
#[derive(Debug)]
pub struct SgdFailure {
    pub error: Error,
    pub partial: RunRecord,
}

impl SgdFailure {
    /// Failure while setting a run up, with an empty record.
    pub fn before_start(error: Error, settings: &SgdSettings) -> Self {
        Self { error, partial: RunRecord::empty(*settings) }
    }
}

impl std::fmt::Display for SgdFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "optimization stopped after {} snapshots: {}", self.partial.snapshots.len(), self.error)
    }
}

impl std::error::Error for SgdFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `settings.iterations` Adadelta steps from `theta0`.
///
/// The objective is evaluated at every visited point (including the last), so
/// `iterations = 0` records the initialization alone. Snapshots are taken every
/// `record_stride` iterations plus the final one. All randomness comes from a
/// ChaCha8 stream seeded with `settings.seed`.
pub fn run_sgd<O: Objective + ?Sized>(
    objective: &mut O,
    theta0: Vec<f64>,
    settings: &SgdSettings,
) -> std::result::Result<RunRecord, SgdFailure> {
    let mut record = RunRecord::empty(*settings);
    let stride = settings.record_stride.max(1);
    let mut state = match Adadelta::new(theta0.len(), settings.momentum, settings.epsilon) {
        Ok(s) => s,
        Err(error) => return Err(SgdFailure { error, partial: record }),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut theta = theta0;
    for n in 0..=settings.iterations {
        let eval = match objective.evaluate(&theta, &mut rng) {
            Ok(e) => e,
            Err(error) => return Err(SgdFailure { error, partial: record }),
        };
        if eval.eta < record.best_eta {
            record.best_eta = eval.eta;
            record.best_iteration = n;
        }
        let last = n == settings.iterations;
        let (update, projection) = if last {
            (Vec::new(), Projection::identity(Vec::new()))
        } else {
            let step = match state.step(&eval.gradient) {
                Ok(s) => s,
                Err(error) => return Err(SgdFailure { error, partial: record }),
            };
            let moved = theta.iter().zip(&step).map(|(t, d)| t + d).collect();
            (step, objective.project(moved))
        };
        if n % stride == 0 || last {
            record.snapshots.push(Snapshot {
                iteration: n,
                loss: eval.loss,
                eta_inverse: 1.0 / eval.eta,
                theta: theta.clone(),
                minibatch: eval.minibatch,
                update,
                kept: if projection.kept.iter().copied().eq(0..theta.len()) { Vec::new() } else { projection.kept.clone() },
            });
        }
        if !last {
            if projection.kept.len() != state.dim() {
                log::debug!("iteration {n}: parameter count {} -> {}", state.dim(), projection.kept.len());
            }
            state.retain(&projection.kept);
            theta = projection.theta;
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Bowl;
    impl Objective for Bowl {
        fn evaluate(&mut self, theta: &[f64], _: &mut ChaCha8Rng) -> Result<Evaluation> {
            let loss = 0.5 * theta.iter().map(|t| t * t).sum::<f64>();
            Ok(Evaluation { loss, eta: loss.max(1e-300), gradient: theta.to_vec(), minibatch: Vec::new() })
        }
    }

    struct Flat;
    impl Objective for Flat {
        fn evaluate(&mut self, theta: &[f64], _: &mut ChaCha8Rng) -> Result<Evaluation> {
            Ok(Evaluation { loss: 1.0, eta: 1.0, gradient: vec![0.0; theta.len()], minibatch: Vec::new() })
        }
    }

    struct Noisy;
    impl Objective for Noisy {
        fn evaluate(&mut self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<Evaluation> {
            use rand::Rng;
            let gradient = theta.iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
            Ok(Evaluation { loss: 1.0, eta: 1.0, gradient, minibatch: vec![rng.random_range(0..10)] })
        }
    }

    struct FailsAt(usize, usize);
    impl Objective for FailsAt {
        fn evaluate(&mut self, theta: &[f64], _: &mut ChaCha8Rng) -> Result<Evaluation> {
            self.1 += 1;
            if self.1 > self.0 {
                return Err(Error::BlindProtocol);
            }
            Ok(Evaluation { loss: 1.0, eta: 1.0, gradient: vec![1.0; theta.len()], minibatch: Vec::new() })
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = Adadelta::new(2, 0.9, 1e-6).unwrap();
        s.step(&[1.0, -2.0]).unwrap();
        let (eg2, edx2) = (s.eg2.clone(), s.edx2.clone());
        let dx = s.step(&[0.0, 0.0]).unwrap();
        assert_eq!(dx, vec![0.0, 0.0]);
        for i in 0..2 {
            assert_eq!(s.eg2[i], 0.9 * eg2[i]);
            assert_eq!(s.edx2[i], 0.9 * edx2[i]);
        }
    }

    #[test]
    fn fresh_state_closed_form() {
        for g in [1e-3, 0.7, 3.0, -12.0] {
            let mut s = Adadelta::new(1, 0.95, 1e-6).unwrap();
            let dx = s.step(&[g]).unwrap()[0];
            let expect = -(1e-6f64).sqrt() * g / (0.05 * g * g + 1e-6).sqrt();
            assert!((dx - expect).abs() <= 1e-12 * expect.abs());
        }
    }

    #[test]
    fn two_step_sequence_matches_hand_computation() {
        let mut s = Adadelta::new(1, 0.9, 1e-6).unwrap();
        let d1 = s.step(&[1.0]).unwrap()[0];
        let d2 = s.step(&[1.0]).unwrap()[0];
        assert!((d1 / -0.0031622618488986635812 - 1.0).abs() < 1e-12);
        assert!((d2 / -0.0032444117737006799088 - 1.0).abs() < 1e-12);
        assert!((s.eg2[0] / 0.19 - 1.0).abs() < 1e-12);
        assert!((s.edx2[0] / 1.952611775822758458e-6 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut s = Adadelta::new(2, 0.9, 1e-6).unwrap();
        assert!(matches!(s.step(&[1.0]), Err(Error::Mismatch { .. })));
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(Adadelta::new(1, 1.0, 1e-6).is_err());
        assert!(Adadelta::new(1, 0.9, 0.0).is_err());
    }

    #[test]
    fn bowl_norm_decreases() {
        let settings = SgdSettings { iterations: 100, ..SgdSettings::default() };
        let rec = run_sgd(&mut Bowl, vec![1.0; 5], &settings).unwrap();
        let norms: Vec<f64> = rec.snapshots.iter().map(|s| s.theta.iter().map(|t| t * t).sum::<f64>()).collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn flat_objective_keeps_theta() {
        let settings = SgdSettings { iterations: 50, ..SgdSettings::default() };
        let rec = run_sgd(&mut Flat, vec![0.3, -1.0], &settings).unwrap();
        assert!(rec.snapshots.iter().all(|s| s.theta == vec![0.3, -1.0]));
    }

    #[test]
    fn zero_iterations_records_initial_point() {
        let settings = SgdSettings { iterations: 0, ..SgdSettings::default() };
        let rec = run_sgd(&mut Bowl, vec![1.0, 2.0], &settings).unwrap();
        assert_eq!(rec.snapshots.len(), 1);
        assert_eq!(rec.snapshots[0].theta, vec![1.0, 2.0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let settings = SgdSettings { iterations: 40, seed: 9, ..SgdSettings::default() };
        let a = run_sgd(&mut Noisy, vec![1.0; 3], &settings).unwrap();
        let b = run_sgd(&mut Noisy, vec![1.0; 3], &settings).unwrap();
        assert_eq!(a, b);
        let c = run_sgd(&mut Noisy, vec![1.0; 3], &SgdSettings { seed: 10, ..settings }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn failure_keeps_partial_record() {
        let settings = SgdSettings { iterations: 10, ..SgdSettings::default() };
        let err = run_sgd(&mut FailsAt(4, 0), vec![1.0], &settings).unwrap_err();
        assert!(matches!(err.error, Error::BlindProtocol));
        assert_eq!(err.partial.snapshots.len(), 4);
    }

    #[test]
    fn stride_thins_snapshots_but_keeps_last() {
        let settings = SgdSettings { iterations: 10, record_stride: 4, ..SgdSettings::default() };
        let rec = run_sgd(&mut Bowl, vec![1.0], &settings).unwrap();
        let its: Vec<usize> = rec.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(its, vec![0, 4, 8, 10]);
    }

    #[test]
    fn snapshots_reconstruct_theta_sequence() {
        let settings = SgdSettings { iterations: 30, seed: 3, ..SgdSettings::default() };
        let rec = run_sgd(&mut Noisy, vec![0.5, -0.25, 2.0], &settings).unwrap();
        for w in rec.snapshots.windows(2) {
            let stepped: Vec<f64> = w[0].theta.iter().zip(&w[0].update).map(|(t, d)| t + d).collect();
            let projected: Vec<f64> = w[0].kept_slots().iter().map(|&i| stepped[i]).collect();
            assert_eq!(projected, w[1].theta);
        }
    }

    proptest! {
        #[test]
        fn averages_stay_nonnegative(gs in proptest::collection::vec(-1e3..1e3f64, 1..40)) {
            let mut s = Adadelta::new(1, 0.95, 1e-6).unwrap();
            for g in gs {
                s.step(&[g]).unwrap();
                prop_assert!(s.eg2[0] >= 0.0 && s.edx2[0] >= 0.0);
            }
        }

        #[test]
        fn first_step_scale_closed_form(g in 0.01..10.0f64, c in 0.1..100.0f64) {
            let mut a = Adadelta::new(1, 0.95, 1e-6).unwrap();
            let mut b = Adadelta::new(1, 0.95, 1e-6).unwrap();
            let ratio = b.step(&[c * g]).unwrap()[0] / a.step(&[g]).unwrap()[0];
            let expect = c * ((0.05 * g * g + 1e-6) / (0.05 * c * c * g * g + 1e-6)).sqrt();
            prop_assert!((ratio - expect).abs() <= 1e-12 * expect);
        }
    }
}
