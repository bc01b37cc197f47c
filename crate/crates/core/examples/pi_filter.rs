//! Phase, decoherence exponent and sensitivity of Carr-Purcell sequences.

use qsense::pulses::{accumulated_phase, decoherence_chi, filter_function};
use qsense::{MultiToneField, PiPulseEngine, PiPulseProtocol, PowerSpectralDensity};

fn main() -> qsense::Result<()> {
    let t = 50e-6;
    let field = MultiToneField::comparison_target();
    let psd = PowerSpectralDensity::nv_bath();
    let engine = PiPulseEngine::new(&field, &psd, t);

    println!("{:>6} {:>12} {:>10} {:>12}", "pulses", "phi", "chi", "1/eta");
    for n in [0, 2, 4, 8, 16, 50] {
        let p = PiPulseProtocol::carr_purcell(n, t)?;
        let phi = accumulated_phase(&p, &field);
        let chi = decoherence_chi(&p, &psd);
        match engine.sensitivity(&p) {
            Ok(eta) => println!("{n:>6} {phi:>12.5} {chi:>10.5} {:>12.5}", 1.0 / eta),
            Err(e) => println!("{n:>6} {phi:>12.5} {chi:>10.5} {e:>12}"),
        }
    }

    let cp8 = PiPulseProtocol::carr_purcell(8, t)?;
    let peak = (1..4000).map(|k| k as f64 * 1e3).max_by(|a, b| {
        filter_function(&cp8, *a).total_cmp(&filter_function(&cp8, *b))
    });
    println!("CP-8 filter peaks near ω = {:.3e} s⁻¹", peak.unwrap_or(0.0));
    Ok(())
}
