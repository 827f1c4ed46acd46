//! Compute the theory quantities for a CT instance and check the
//! convergence envelope machinery on a small Gaussian problem.
//!
//! Run with: cargo run --release --example theory_report

use ndarray::Array1;
use polyct::constraints::ConstraintSet;
use polyct::experiments::{build_theory_report, TheoryConfig};
use polyct::geometry::{build_gaussian_matrix, Image};
use polyct::model::{SpectralModel, Spectrum, WindowedSpectra};
use polyct::rng::seeded;
use polyct::theory::{
    empirical_nu, gamma_star, gaussian_width_ball_exact, lipschitz_bound, rho, theorem1_envelope,
};
use rand::Rng;

fn main() -> polyct::Result<()> {
    // full report on a small CT instance
    let cfg = TheoryConfig {
        grid_side: 16,
        n_views: 20,
        n_cells: 20,
        n_wavelengths: 20,
        intensity: 1.0e5,
        seed: 0,
        n_samples: Some(100),
    };
    let report = build_theory_report(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report.to_json())?);

    // envelope on a Gaussian instance: nu-hat and L-hat feed the
    // geometric-decay bound
    let (d, n) = (40, 40 * 40);
    let matrix = build_gaussian_matrix(n, d, 1);
    let model: SpectralModel =
        WindowedSpectra::single(Spectrum::new(vec![1.0], vec![1.0], 1.0)?).into();
    let mut rng = seeded(2);
    let mut x_star: Array1<f64> = Array1::from_iter((0..d).map(|_| rng.gen::<f64>() - 0.5));
    x_star *= 3.0 / x_star.dot(&x_star).sqrt();
    let truth = Image::new(x_star)?;
    let set = ConstraintSet::L2Ball { radius: 12.0, center: truth.clone() };
    let nu = empirical_nu(&matrix, &model, &truth, &set, 500, 3)?;
    let l = lipschitz_bound(&matrix, &model)?;
    let envelope = theorem1_envelope(nu, l, 0.0, 3.0)?;
    println!("\ngaussian instance: nu_hat = {nu:.4e}, L_hat = {l:.4e}");
    for t in [0, 100, 1000, 10_000] {
        println!("envelope({t:>6}) = {:.6e}", envelope.eval(t as f64));
    }

    // the fixed-point scale and the polynomial factor for the same spectrum
    let spec = Spectrum::new(vec![1.0], vec![1.0], 1.0)?;
    let omega = gaussian_width_ball_exact(d)?;
    println!("\nomega_bar(ball, d={d}) = {omega:.4}");
    match gamma_star(&spec, 3.0, omega, 100 * n) {
        Ok(g) => println!("gamma_star = {g:.6e}"),
        Err(e) => println!("gamma_star: {e}"),
    }
    println!("rho(||x*|| = 3) = {:.4}", rho(&spec, 3.0));
    Ok(())
}
