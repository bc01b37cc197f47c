//! Draw colored-noise traces from the NV bath spectrum and compare their
//! sample variance with the band-limited spectral integral.

use qsense::noise::{NoiseSynthesizer, PowerSpectralDensity};

fn main() -> qsense::Result<()> {
    let psd = PowerSpectralDensity::nv_bath();
    let (t, dt) = (50e-6, 50e-9);
    let synth = NoiseSynthesizer::new(&psd, t, dt)?;
    let grid = *synth.grid();
    println!("lattice: {} frequencies, Δω = {:.1} s⁻¹", grid.n_freq, grid.d_omega);

    let traces: Vec<_> = (0..2000).map(|seed| synth.trace(seed)).collect();
    let n = traces.len() * traces[0].len();
    let variance = traces.iter().flat_map(|tr| &tr.samples).map(|x| x * x).sum::<f64>() / n as f64;
    let band = grid.omega(grid.n_freq - 1) + 0.5 * grid.d_omega;
    println!("sampled variance  {variance:.4e} s⁻²");
    println!("spectral integral {:.4e} s⁻²", psd.band_power(band));

    for w in [0.0, 4.407e5, 2.6595e6, 4.4818e6] {
        println!("S({w:.4e}) = {:.4e}", psd.evaluate(w));
    }
    Ok(())
}
