//! One EXACT reconstruction of the PMMA phantom from Poisson-noisy
//! polychromatic measurements, with the trace and image written to
//! `out/exact_reconstruction/`.
//!
//! Run with: cargo run --release --example exact_reconstruction

use ndarray::Array1;
use std::path::Path;

use polyct::constraints::{tv_norm, ConstraintSet};
use polyct::geometry::{build_radon_matrix, make_pmma_phantom, Image, ParallelBeamGeometry};
use polyct::model::{expected_counts_model, sample_poisson, SpectralModel, WindowedSpectra};
use polyct::solvers::{exact_solve, Problem, SolverConfig, StepSize, StepSizeRule};

fn main() -> polyct::Result<()> {
    let out = Path::new("out/exact_reconstruction");
    std::fs::create_dir_all(out)?;

    let grid = 25;
    let geom = ParallelBeamGeometry::with_unit_field(25, 50, grid)?;
    let matrix = build_radon_matrix(&geom);
    let model: SpectralModel = WindowedSpectra::synthetic_ct_default(50, 1.0e6)?.into();
    let truth = make_pmma_phantom(grid)?;
    let means = expected_counts_model(&matrix, &truth, &model)?;
    let counts = sample_poisson(&means, 0)?;

    // oracle TV radius, intersected with the nonnegative orthant
    let constraint = ConstraintSet::tv_nonneg(tv_norm(&truth)?, grid);
    let problem = Problem {
        matrix: &matrix,
        model: &model,
        counts: &counts,
        constraint: &constraint,
        truth: Some(&truth),
    };
    let cfg = SolverConfig {
        step_size: StepSize::Rule(StepSizeRule::PositiveMeas),
        max_iters: 6000,
        ..Default::default()
    };
    let x1 = Image::new_2d(Array1::from_elem(grid * grid, 0.5), grid)?;
    let (recon, trace) = exact_solve(&problem, &cfg, &x1)?;

    println!(
        "EXACT: {} iterations, converged = {}, RMSE = {:.4e}",
        trace.iterations(),
        trace.converged,
        trace.final_rmse.unwrap()
    );
    std::fs::write(out.join("trace.csv"), trace.to_csv())?;
    recon.write_pgm(&out.join("recon.pgm"))?;
    recon.write_csv(&out.join("recon.csv"))?;
    println!("trace and reconstruction written to {}", out.display());
    Ok(())
}
