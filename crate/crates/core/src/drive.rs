//! Continuous in-plane drive: the qubit evolves through one static SU(2) step
//! per `dt` with control angles `(φ_x, φ_y)` and the signal plus noise along z.
//!
//! Each step applies `U_k = exp(-i v_k·σ / 2)` with
//! `v_k = (φ_x[k], φ_y[k], dt·(γ b c_k + ξ_k))`, where `c_k` is the average of
//! the target waveform over the step. The readout is `⟨x⟩` after starting in
//! `|+x⟩`, and the Fisher information of the noise-averaged state is
//! `F = (∂_b⟨x⟩)² / (1 - ⟨x⟩²)`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Waveform;
use crate::noise::{NoisePool, NoiseTrace};
use crate::optimizer::{run_sgd, Evaluation, Objective, Projection, RunRecord, SgdFailure, SgdSettings};
use crate::pulses::{PiPulseProtocol, LOSS_SCALE};
use crate::su2::{inner, Mat2, RotationJet, Spinor};
use crate::GYROMAGNETIC_RATIO;

pub const DEFAULT_DT: f64 = 50e-9;
pub const DEFAULT_INIT_RANGE: f64 = PI / 10.0;
/// Nominal amplitude at which Fisher information is evaluated, μT.
pub const DEFAULT_B: f64 = 1.0;

/// Number of `dt` steps in `T`, requiring `T` to be a whole multiple of `dt`.
pub fn step_count(sensing_time: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && sensing_time > 0.0) {
        return Err(Error::invalid("dt_ns", "dt and the sensing time must be positive"));
    }
    let n = (sensing_time / dt).round();
    if n < 1.0 || (n * dt - sensing_time).abs() > 1e-9 * sensing_time {
        return Err(Error::invalid("dt_ns", format!("sensing time {sensing_time} s is not a multiple of dt = {dt} s")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousProtocol {
    phi_x: Vec<f64>,
    phi_y: Vec<f64>,
    dt: f64,
}

impl ContinuousProtocol {
    pub fn new(phi_x: Vec<f64>, phi_y: Vec<f64>, dt: f64) -> Result<Self> {
        if phi_x.len() != phi_y.len() {
            return Err(Error::Mismatch { what: "phi_y", expected: phi_x.len(), actual: phi_y.len() });
        }
        if !(dt > 0.0) {
            return Err(Error::invalid("dt_ns", "must be positive"));
        }
        if phi_x.iter().chain(&phi_y).any(|p| !(p.abs() <= PI)) {
            return Err(Error::invalid("phi", "rotation angles must lie in [-π, π]"));
        }
        Ok(Self { phi_x, phi_y, dt })
    }

    pub fn zeros(n_steps: usize, dt: f64) -> Result<Self> {
        Self::new(vec![0.0; n_steps], vec![0.0; n_steps], dt)
    }

    /// Every angle i.i.d. uniform on `[-range, range]`.
    pub fn random<R: Rng + ?Sized>(n_steps: usize, dt: f64, range: f64, rng: &mut R) -> Result<Self> {
        if !(range >= 0.0 && range <= PI) {
            return Err(Error::invalid("init_range_rad", format!("must lie in [0, π], got {range}")));
        }
        let mut draw = || (0..n_steps).map(|_| range * (2.0 * rng.random::<f64>() - 1.0)).collect::<Vec<_>>();
        let phi_x = draw();
        let phi_y = draw();
        Self::new(phi_x, phi_y, dt)
    }

    /// `(φ_x[0], φ_y[0], φ_x[1], ...)`.
    pub fn from_interleaved(theta: &[f64], dt: f64) -> Result<Self> {
        if theta.len() % 2 != 0 {
            return Err(Error::invalid("phi", "interleaved angle vector has odd length"));
        }
        let phi_x = theta.iter().step_by(2).copied().collect();
        let phi_y = theta.iter().skip(1).step_by(2).copied().collect();
        Self::new(phi_x, phi_y, dt)
    }

    pub fn interleaved(&self) -> Vec<f64> {
        self.phi_x.iter().zip(&self.phi_y).flat_map(|(&x, &y)| [x, y]).collect()
    }

    /// π pulses as single-step `φ_x = π` rotations in the step containing each
    /// pulse time. Two pulses landing in one step cancel.
    pub fn from_pi_pulses(protocol: &PiPulseProtocol, dt: f64) -> Result<Self> {
        let n = step_count(protocol.sensing_time(), dt)?;
        let mut phi_x = vec![0.0; n];
        for &t in protocol.pulse_times() {
            let k = ((t / dt).floor() as usize).min(n - 1);
            phi_x[k] = if phi_x[k] == 0.0 { PI } else { 0.0 };
        }
        Self::new(phi_x, vec![0.0; n], dt)
    }

    pub fn phi_x(&self) -> &[f64] {
        &self.phi_x
    }

    pub fn phi_y(&self) -> &[f64] {
        &self.phi_y
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.phi_x.len()
    }

    pub fn sensing_time(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }
}

/// Clamp every angle into the `±π` box.
pub fn clamp_angles(theta: Vec<f64>) -> Vec<f64> {
    theta.into_iter().map(|p| p.clamp(-PI, PI)).collect()
}

/// Density matrix and its derivative in the field amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitState {
    pub rho: Mat2,
    pub drho_db: Mat2,
}

impl QubitState {
    /// `|+x⟩⟨+x|` with zero derivative.
    pub fn plus_x() -> Self {
        let h = Complex64::new(0.5, 0.0);
        Self { rho: Mat2([[h, h], [h, h]]), drho_db: Mat2::ZERO }
    }

    pub fn expect_x(&self) -> f64 {
        self.rho.pauli_component(0).re
    }

    pub fn d_expect_x(&self) -> f64 {
        self.drho_db.pauli_component(0).re
    }
}

impl Default for QubitState {
    fn default() -> Self {
        Self::plus_x()
    }
}

/// `⟨x⟩` and `∂_b⟨x⟩` for one noise realization, optionally with their
/// gradients in the interleaved control angles.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceResponse {
    pub x: f64,
    pub dx: f64,
    pub grad_x: Vec<f64>,
    pub grad_dx: Vec<f64>,
}

/// Noise-averaged readout and the resulting Fisher information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherEstimate {
    pub x: f64,
    pub dx: f64,
    pub fisher: f64,
}

/// Sensitivity and its gradient in the interleaved angles.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveGradient {
    pub eta: f64,
    pub estimate: FisherEstimate,
    pub d_eta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ContinuousDriveEngine<W> {
    field: W,
    dt: f64,
    /// Step averages `c_k = (1/dt) ∫ f` over each step.
    cell: Vec<f64>,
}

fn plus_x_spinor() -> Spinor {
    let s = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    [s, s]
}

fn sigma_x(v: &Spinor) -> Spinor {
    [v[1], v[0]]
}

impl<W: Waveform + Sync> ContinuousDriveEngine<W> {
    pub fn new(field: W, sensing_time: f64, dt: f64) -> Result<Self> {
        let n = step_count(sensing_time, dt)?;
        let cell = (0..n)
            .map(|k| {
                let a = k as f64 * dt;
                field.integral(a, a + dt) / dt
            })
            .collect();
        Ok(Self { field, dt, cell })
    }

    pub fn field(&self) -> &W {
        &self.field
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.cell.len()
    }

    pub fn sensing_time(&self) -> f64 {
        self.dt * self.cell.len() as f64
    }

    fn check(&self, protocol: &ContinuousProtocol) -> Result<()> {
        if protocol.n_steps() != self.n_steps() {
            return Err(Error::Mismatch { what: "protocol steps", expected: self.n_steps(), actual: protocol.n_steps() });
        }
        if (protocol.dt - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::invalid("dt_ns", "protocol and engine disagree on dt"));
        }
        Ok(())
    }

    fn check_trace(&self, trace: &NoiseTrace) -> Result<()> {
        if trace.len() < self.n_steps() {
            return Err(Error::Mismatch { what: "noise trace", expected: self.n_steps(), actual: trace.len() });
        }
        if (trace.dt - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::invalid("dt_ns", "noise trace and engine disagree on dt"));
        }
        Ok(())
    }

    fn b_rate(&self, k: usize) -> f64 {
        GYROMAGNETIC_RATIO * self.cell[k] * self.dt
    }

    fn step_vector(&self, protocol: &ContinuousProtocol, k: usize, b: f64, xi: f64) -> [f64; 3] {
        [protocol.phi_x[k], protocol.phi_y[k], self.b_rate(k) * b + xi * self.dt]
    }

    /// `U_k` and `∂U_k/∂b` for step `k` with noise sample `xi` (rad/s).
    pub fn step_unitary(&self, protocol: &ContinuousProtocol, k: usize, b: f64, xi: f64) -> (Mat2, Mat2) {
        let jet = RotationJet::new(self.step_vector(protocol, k, b, xi));
        (jet.u, jet.d[2].scale(Complex64::new(self.b_rate(k), 0.0)))
    }

    /// Propagates `ρ` and `∂ρ/∂b` through the unitary chain by the product rule.
    pub fn evolve(
        &self,
        protocol: &ContinuousProtocol,
        b: f64,
        trace: Option<&NoiseTrace>,
        rho0: QubitState,
    ) -> Result<QubitState> {
        self.check(protocol)?;
        if let Some(t) = trace {
            self.check_trace(t)?;
        }
        let mut s = rho0;
        for k in 0..self.n_steps() {
            let xi = trace.map_or(0.0, |t| t.samples[k]);
            let (u, du) = self.step_unitary(protocol, k, b, xi);
            let ud = u.adjoint();
            let drho = u * s.drho_db * ud + du * s.rho * ud + u * s.rho * du.adjoint();
            s = QubitState { rho: u * s.rho * ud, drho_db: drho };
        }
        Ok(s)
    }

    /// `∂ρ_f/∂θ` for one interleaved angle component, carried as one extra
    /// product-rule accumulator.
    pub fn evolve_angle_derivative(
        &self,
        protocol: &ContinuousProtocol,
        b: f64,
        trace: Option<&NoiseTrace>,
        rho0: QubitState,
        component: usize,
    ) -> Result<Mat2> {
        self.check(protocol)?;
        if let Some(t) = trace {
            self.check_trace(t)?;
        }
        if component >= 2 * self.n_steps() {
            return Err(Error::invalid("component", format!("index {component} out of range")));
        }
        let (target, axis) = (component / 2, component % 2);
        let mut rho = rho0.rho;
        let mut d = Mat2::ZERO;
        for k in 0..self.n_steps() {
            let xi = trace.map_or(0.0, |t| t.samples[k]);
            let jet = RotationJet::new(self.step_vector(protocol, k, b, xi));
            let ud = jet.u.adjoint();
            d = jet.u * d * ud;
            if k == target {
                let du = jet.d[axis];
                d = d + du * rho * ud + jet.u * rho * du.adjoint();
            }
            rho = jet.u * rho * ud;
        }
        Ok(d)
    }

    /// Pure-state forward pass; with `gradient` also a reverse sweep that
    /// yields `∂⟨x⟩/∂θ` and `∂(∂_b⟨x⟩)/∂θ` for every angle.
    pub fn trace_response(&self, protocol: &ContinuousProtocol, b: f64, xi: Option<&[f64]>, gradient: bool) -> TraceResponse {
        let n = self.n_steps();
        let xi_at = |k: usize| xi.map_or(0.0, |x| x[k]);
        let mut psi = plus_x_spinor();
        let mut chi = [Complex64::new(0.0, 0.0); 2];
        if !gradient {
            for k in 0..n {
                let v = self.step_vector(protocol, k, b, xi_at(k));
                let jet = RotationJet::new(v);
                let du = jet.d[2].scale(Complex64::new(self.b_rate(k), 0.0));
                let next_chi = jet.u.apply(&chi);
                let extra = du.apply(&psi);
                chi = [next_chi[0] + extra[0], next_chi[1] + extra[1]];
                psi = jet.u.apply(&psi);
            }
            let x = inner(&psi, &sigma_x(&psi)).re;
            let dx = 2.0 * inner(&psi, &sigma_x(&chi)).re;
            return TraceResponse { x, dx, grad_x: Vec::new(), grad_dx: Vec::new() };
        }

        let mut jets = Vec::with_capacity(n);
        let mut psis = Vec::with_capacity(n);
        let mut chis = Vec::with_capacity(n);
        for k in 0..n {
            let jet = RotationJet::new(self.step_vector(protocol, k, b, xi_at(k)));
            psis.push(psi);
            chis.push(chi);
            let du = jet.d[2].scale(Complex64::new(self.b_rate(k), 0.0));
            let next_chi = jet.u.apply(&chi);
            let extra = du.apply(&psi);
            chi = [next_chi[0] + extra[0], next_chi[1] + extra[1]];
            psi = jet.u.apply(&psi);
            jets.push(jet);
        }
        let x = inner(&psi, &sigma_x(&psi)).re;
        let dx = 2.0 * inner(&psi, &sigma_x(&chi)).re;

        let mut grad_x = vec![0.0; 2 * n];
        let mut grad_dx = vec![0.0; 2 * n];
        let mut q = sigma_x(&psi);
        let mut p = sigma_x(&chi);
        for k in (0..n).rev() {
            let jet = &jets[k];
            let rate = Complex64::new(self.b_rate(k), 0.0);
            let (psi_k, chi_k) = (&psis[k], &chis[k]);
            for (axis, mixed) in [(0, jet.dz_dx), (1, jet.dz_dy)] {
                let u_theta = jet.d[axis];
                let du_theta = mixed.scale(rate);
                let a = u_theta.apply(psi_k);
                let c = u_theta.apply(chi_k);
                let e = du_theta.apply(psi_k);
                grad_x[2 * k + axis] = 2.0 * inner(&q, &a).re;
                grad_dx[2 * k + axis] = 2.0 * (inner(&p, &a) + inner(&q, &[c[0] + e[0], c[1] + e[1]])).re;
            }
            let du = jet.d[2].scale(rate);
            let back_p = jet.u.apply_adjoint(&p);
            let back_q = du.apply_adjoint(&q);
            p = [back_p[0] + back_q[0], back_p[1] + back_q[1]];
            q = jet.u.apply_adjoint(&q);
        }
        TraceResponse { x, dx, grad_x, grad_dx }
    }

    fn responses(
        &self,
        protocol: &ContinuousProtocol,
        b: f64,
        traces: &[&NoiseTrace],
        gradient: bool,
    ) -> Result<Vec<TraceResponse>> {
        self.check(protocol)?;
        for t in traces {
            self.check_trace(t)?;
        }
        if traces.is_empty() {
            return Ok(vec![self.trace_response(protocol, b, None, gradient)]);
        }
        Ok(traces
            .par_iter()
            .map(|t| self.trace_response(protocol, b, Some(&t.samples), gradient))
            .collect())
    }

    /// Ratio-of-averages Fisher information over `traces` (noiseless if empty).
    pub fn fisher_information(&self, protocol: &ContinuousProtocol, b: f64, traces: &[&NoiseTrace]) -> Result<FisherEstimate> {
        let rs = self.responses(protocol, b, traces, false)?;
        fisher_from(&rs)
    }

    /// `η = √(T/F)` in μT·s^{1/2}.
    pub fn sensitivity(&self, protocol: &ContinuousProtocol, b: f64, traces: &[&NoiseTrace]) -> Result<f64> {
        let est = self.fisher_information(protocol, b, traces)?;
        eta_from(est.fisher, self.sensing_time())
    }

    pub fn gradient(&self, protocol: &ContinuousProtocol, b: f64, traces: &[&NoiseTrace]) -> Result<DriveGradient> {
        let rs = self.responses(protocol, b, traces, true)?;
        let est = fisher_from(&rs)?;
        let eta = eta_from(est.fisher, self.sensing_time())?;
        let m = 2 * self.n_steps();
        let inv = 1.0 / rs.len() as f64;
        let mut gx = vec![0.0; m];
        let mut gd = vec![0.0; m];
        for r in &rs {
            for i in 0..m {
                gx[i] += r.grad_x[i];
                gd[i] += r.grad_dx[i];
            }
        }
        let denom = 1.0 - est.x * est.x;
        let d_eta = gx
            .iter()
            .zip(&gd)
            .map(|(&gx, &gd)| {
                let df = 2.0 * est.dx * gd * inv / denom + 2.0 * est.x * est.dx * est.dx * gx * inv / (denom * denom);
                -0.5 * eta / est.fisher * df
            })
            .collect();
        Ok(DriveGradient { eta, estimate: est, d_eta })
    }
}

fn fisher_from(rs: &[TraceResponse]) -> Result<FisherEstimate> {
    let inv = 1.0 / rs.len() as f64;
    let x = rs.iter().map(|r| r.x).sum::<f64>() * inv;
    let dx = rs.iter().map(|r| r.dx).sum::<f64>() * inv;
    if x.abs() >= 1.0 - 1e-12 {
        return Err(Error::DegenerateFisher { expect_x: x });
    }
    Ok(FisherEstimate { x, dx, fisher: dx * dx / (1.0 - x * x) })
}

fn eta_from(fisher: f64, sensing_time: f64) -> Result<f64> {
    if !(fisher > 0.0) {
        return Err(Error::BlindProtocol);
    }
    Ok((sensing_time / fisher).sqrt())
}

/// Optimizer view of the drive: parameters are interleaved angles in radians,
/// each evaluation draws a fresh minibatch from the pool, and the loss is η in
/// μT·μs^{1/2}.
#[derive(Debug, Clone)]
pub struct ContinuousObjective<W> {
    engine: ContinuousDriveEngine<W>,
    pool: Arc<NoisePool>,
    b: f64,
}

impl<W: Waveform + Sync> ContinuousObjective<W> {
    pub fn new(engine: ContinuousDriveEngine<W>, pool: Arc<NoisePool>, b: f64) -> Self {
        Self { engine, pool, b }
    }

    pub fn engine(&self) -> &ContinuousDriveEngine<W> {
        &self.engine
    }
}

impl<W: Waveform + Sync> Objective for ContinuousObjective<W> {
    fn evaluate(&mut self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<Evaluation> {
        let protocol = ContinuousProtocol::from_interleaved(theta, self.engine.dt)?;
        let minibatch = self.pool.draw_minibatch(rng);
        let traces: Vec<&NoiseTrace> = minibatch.iter().map(|&i| self.pool.trace(i)).collect();
        let g = self.engine.gradient(&protocol, self.b, &traces)?;
        Ok(Evaluation {
            loss: g.eta * LOSS_SCALE,
            eta: g.eta,
            gradient: g.d_eta.iter().map(|d| d * LOSS_SCALE).collect(),
            minibatch,
        })
    }

    fn project(&self, theta: Vec<f64>) -> Projection {
        Projection::identity(clamp_angles(theta))
    }
}

/// Optimizes a continuous drive from a random start drawn with
/// `settings.seed` (on a separate stream from the minibatch draws).
pub fn optimize_continuous<W: Waveform + Sync>(
    field: W,
    pool: Arc<NoisePool>,
    sensing_time: f64,
    init_range: f64,
    b: f64,
    settings: &SgdSettings,
) -> std::result::Result<RunRecord, SgdFailure> {
    let fail = |error| SgdFailure::before_start(error, settings);
    let dt = pool.dt();
    let engine = ContinuousDriveEngine::new(field, sensing_time, dt).map_err(fail)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    init_rng.set_stream(1);
    let start = ContinuousProtocol::random(engine.n_steps(), dt, init_range, &mut init_rng).map_err(fail)?;
    let mut objective = ContinuousObjective::new(engine, pool, b);
    run_sgd(&mut objective, start.interleaved(), settings)
}
