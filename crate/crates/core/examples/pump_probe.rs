//! Pump-only optimization of a photocurrent pump-probe sequence.

use qsense::optimizer::SgdSettings;
use qsense::pump::{optimize_pump, probe_flips, pump_sensitivity, ProbeMode, DEFAULT_PROBE_PULSES, DEFAULT_PUMP_PULSES, DEFAULT_TAU};
use qsense::{PowerSpectralDensity, PumpProbeConfig};

fn main() -> qsense::Result<()> {
    let psd = PowerSpectralDensity::nv_bath();
    let config = PumpProbeConfig::initial(DEFAULT_PUMP_PULSES, DEFAULT_TAU, ProbeMode::FrontLoaded, DEFAULT_PROBE_PULSES)?;
    let mut cp = config.clone();
    cp.probe_flips = probe_flips(ProbeMode::Cp, DEFAULT_PROBE_PULSES, DEFAULT_TAU);
    println!("evenly spaced pump, CP probe:           1/eta = {:.3}", 1.0 / pump_sensitivity(&cp, &psd)?);
    println!("evenly spaced pump, front-loaded probe: 1/eta = {:.3}", 1.0 / pump_sensitivity(&config, &psd)?);

    let settings = SgdSettings { iterations: 2000, record_stride: 250, ..SgdSettings::default() };
    let record = optimize_pump(&config, &psd, &settings, false).map_err(|f| f.error)?;
    for s in &record.snapshots {
        println!("{:>5}  1/eta = {:>8.3}  switches = {}", s.iteration, s.eta_inverse, s.theta.len());
    }
    Ok(())
}
