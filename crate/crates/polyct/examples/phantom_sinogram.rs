//! Build the PMMA phantom, trace the parallel-beam system matrix, and write
//! a noisy sinogram plus the phantom image to `out/phantom_sinogram/`.
//!
//! Run with: cargo run --release --example phantom_sinogram

use std::path::Path;

use polyct::experiments::write_measurements;
use polyct::geometry::{build_radon_matrix, make_pmma_phantom, ParallelBeamGeometry};
use polyct::model::{expected_counts, sample_poisson, WindowedSpectra};

fn main() -> polyct::Result<()> {
    let out = Path::new("out/phantom_sinogram");
    std::fs::create_dir_all(out)?;

    let grid = 25;
    let geom = ParallelBeamGeometry::with_unit_field(50, 50, grid)?;
    let matrix = build_radon_matrix(&geom);
    println!(
        "system matrix: {} rays x {} pixels, {} stored weights",
        matrix.n_rows(),
        matrix.n_cols(),
        matrix.nnz()
    );

    let phantom = make_pmma_phantom(grid)?;
    phantom.write_pgm(&out.join("phantom.pgm"))?;
    phantom.write_csv(&out.join("phantom.csv"))?;
    matrix.write_csv(&out.join("matrix.csv"))?;

    let spectra = WindowedSpectra::synthetic_ct_default(50, 1.0e6)?;
    let means = expected_counts(&matrix, &phantom, &spectra)?;
    let counts = sample_poisson(&means, 0)?;
    write_measurements(&counts, &out.join("sinogram.csv"))?;
    std::fs::write(
        out.join("spectra.json"),
        serde_json::to_string_pretty(&spectra.to_json())?,
    )?;
    println!("wrote phantom, matrix, spectra and sinogram to {}", out.display());
    Ok(())
}
