//! Adadelta on π-pulse times, starting from 50 evenly spaced pulses.
//!
//! `cargo run --release --example optimize_pi -- [iterations]`

use qsense::optimizer::SgdSettings;
use qsense::pulses::optimize_pi;
use qsense::{MultiToneField, PowerSpectralDensity};

fn main() {
    let iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1000);
    let settings = SgdSettings { iterations, record_stride: 50, ..SgdSettings::default() };
    let field = MultiToneField::comparison_target();
    let record = match optimize_pi(&field, &PowerSpectralDensity::nv_bath(), 50e-6, 50, &settings) {
        Ok(r) => r,
        Err(fail) => {
            eprintln!("{fail}");
            std::process::exit(3);
        }
    };
    for s in &record.snapshots {
        println!("{:>5}  1/eta = {:>9.3}  pulses = {}", s.iteration, s.eta_inverse, s.theta.len());
    }
    println!(
        "best 1/eta {:.3} at iteration {} ({:.0}x the start)",
        record.best_eta_inverse(),
        record.best_iteration,
        record.best_eta_inverse() / record.initial_eta_inverse()
    );
}
