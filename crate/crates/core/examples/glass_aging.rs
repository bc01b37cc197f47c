//! Two-time autocorrelation of a π-pulse optimization and its growth fit.

use qsense::glass::{delta_series, fit_growth, SpinKind};
use qsense::optimizer::SgdSettings;
use qsense::pulses::optimize_pi;
use qsense::{MultiToneField, PowerSpectralDensity, ProtocolTrajectory};

fn main() -> qsense::Result<()> {
    let settings = SgdSettings { iterations: 1000, ..SgdSettings::default() };
    let field = MultiToneField::aging_target();
    let record = optimize_pi(&field, &PowerSpectralDensity::nv_bath(), 50e-6, 50, &settings).map_err(|f| f.error)?;
    let trajectory = ProtocolTrajectory::from_record(&record, SpinKind::PiGaps).truncated();
    println!("{} snapshots before the first annihilation", trajectory.len());

    let series = delta_series(&trajectory, 5)?;
    for &(n, d) in series.iter().filter(|(n, _)| n.is_power_of_two()) {
        println!("Δ(5, 5 + {n:>4}) = {d:.4e} μs²");
    }
    let n: Vec<f64> = series.iter().map(|p| p.0 as f64).collect();
    let delta: Vec<f64> = series.iter().map(|p| p.1).collect();
    let fit = fit_growth(&n, &delta)?;
    println!("{}", fit.report());
    Ok(())
}
