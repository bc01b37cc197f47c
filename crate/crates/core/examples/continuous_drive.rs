//! Continuous-drive engine: Fisher information of a free evolution and of an
//! embedded Carr-Purcell sequence, then a short optimization on a small pool.

use std::sync::Arc;

use qsense::drive::optimize_continuous;
use qsense::optimizer::SgdSettings;
use qsense::{ContinuousDriveEngine, ContinuousProtocol, MultiToneField, NoisePool, NoiseTrace, PiPulseProtocol, PowerSpectralDensity};

fn main() -> qsense::Result<()> {
    let (t, dt, b) = (50e-6, 50e-9, 1.0);
    let field = MultiToneField::comparison_target();
    let psd = PowerSpectralDensity::nv_bath();
    let engine = ContinuousDriveEngine::new(&field, t, dt)?;
    let pool = Arc::new(NoisePool::build(&psd, t, dt, 400, 50, 11)?);
    let all: Vec<&NoiseTrace> = pool.traces().iter().collect();

    let free = ContinuousProtocol::zeros(engine.n_steps(), dt)?;
    let noiseless = engine.fisher_information(&free, b, &[])?;
    println!("free evolution, noiseless: F = {:.4e}, <x> = {:.4}", noiseless.fisher, noiseless.x);

    let cp = ContinuousProtocol::from_pi_pulses(&PiPulseProtocol::carr_purcell(8, t)?, dt)?;
    for (name, p) in [("free", &free), ("CP-8", &cp)] {
        match engine.sensitivity(p, b, &all) {
            Ok(eta) => println!("{name:>5} in noise: 1/eta = {:.3}", 1.0 / eta),
            Err(e) => println!("{name:>5} in noise: {e}"),
        }
    }

    let settings = SgdSettings { iterations: 100, record_stride: 20, seed: 3, ..SgdSettings::default() };
    match optimize_continuous(&field, pool.clone(), t, std::f64::consts::PI / 10.0, b, &settings) {
        Ok(rec) => {
            for s in &rec.snapshots {
                println!("{:>4}  minibatch 1/eta = {:.3}", s.iteration, s.eta_inverse);
            }
        }
        Err(fail) => eprintln!("{fail}"),
    }
    Ok(())
}
