//! Sample-size sweep under Gaussian measurements, noiseless and
//! monochromatic: more measurements mean fewer iterations to reach the
//! distance target, up to a saturation threshold.
//!
//! Run with: cargo run --release --example gaussian_convergence

use polyct::experiments::{run_gaussian_samples_sweep, GaussianSweepConfig};
use std::path::Path;

fn main() -> polyct::Result<()> {
    let out = Path::new("out/gaussian_convergence");
    let cfg = GaussianSweepConfig {
        d: 100,
        x_star_norm: 3.0,
        step_size: 0.25,
        sample_factors: vec![5, 10, 20, 40, 80],
        seeds: vec![0],
        distance_tol: 1e-6,
        max_iters: 100_000,
    };
    let report = run_gaussian_samples_sweep(&cfg, out)?;
    println!("n        iterations to ||x_t - x*|| <= 1e-6");
    for cell in &report.cells {
        println!(
            "{:<8} {}",
            cell.n,
            cell.iterations_to_tol
                .map(|i| i.to_string())
                .unwrap_or_else(|| "did not converge".into())
        );
    }
    for (seed, ok) in &report.monotone_per_seed {
        println!("seed {seed}: iteration counts nonincreasing in n = {ok}");
    }
    println!("cell files in {}", out.display());
    Ok(())
}
