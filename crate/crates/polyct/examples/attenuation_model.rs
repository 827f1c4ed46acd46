//! The polychromatic attenuation model: spectra, the response h(t), and
//! expected photon counts along rays.
//!
//! Run with: cargo run --release --example attenuation_model

use ndarray::Array1;
use polyct::geometry::{build_radon_matrix, make_pmma_phantom, ParallelBeamGeometry};
use polyct::model::{
    attenuation_derivative_magnitude, attenuation_response, expected_counts, sample_poisson,
    Spectrum, WindowedSpectra,
};

fn main() -> polyct::Result<()> {
    // A synthetic 50-wavelength calibration: attenuation coefficients
    // log-spaced in [0.2, 5.0], bell-shaped sensitivities.
    let spectrum = Spectrum::synthetic_default(50, 1.0e6)?;
    println!("wavelengths: {}", spectrum.n_wavelengths());
    println!("sum_j s_j mu_j = {:.4}", spectrum.weighted_attenuation_sum());
    println!("\n  t      h(t)       |h'(t)|");
    for t in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0] {
        let h = attenuation_response(&spectrum, t);
        let dh = if t > 0.0 {
            attenuation_derivative_magnitude(&spectrum, t)?
        } else {
            f64::NAN
        };
        println!("  {t:<5} {h:<10.6} {dh:<10.6}");
    }

    // Expected counts through the phantom for a three-window detector.
    let geom = ParallelBeamGeometry::with_unit_field(12, 25, 25)?;
    let matrix = build_radon_matrix(&geom);
    let phantom = make_pmma_phantom(25)?;
    let spectra = WindowedSpectra::synthetic_ct_default(50, 1.0e6)?;
    let means = expected_counts(&matrix, &phantom, &spectra)?;
    let noisy = sample_poisson(&means, 0)?;
    println!("\nstacked measurements: {} ({} windows x {} rays)",
        means.n_total(), spectra.window_count(), matrix.n_rows());
    let mean0 = means.window_slice(0);
    let count0 = noisy.window_slice(0);
    let preview: Vec<String> = (0..5)
        .map(|i| format!("{:.0}/{:.0}", mean0[200 + i], count0[200 + i]))
        .collect();
    println!("window 0, rays 200..205 (mean/sampled): {}", preview.join("  "));
    let total: f64 = means.counts.sum();
    println!("total expected photons: {:.3e}", total);
    let _ = Array1::<f64>::zeros(1);
    Ok(())
}
