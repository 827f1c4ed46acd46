use ndarray::Array1;
use polyct::constraints::{tv_norm, ConstraintSet};
use polyct::geometry::{build_radon_matrix, make_pmma_phantom, Image, ParallelBeamGeometry};
use polyct::model::{expected_counts_model, sample_poisson, SpectralModel, WindowedSpectra};
use polyct::solvers::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let views: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let max_iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20000);
    let which = args.get(3).cloned().unwrap_or_else(|| "all".into());
    let grid = 25usize;
    let geom = ParallelBeamGeometry::with_unit_field(views, 50, grid).unwrap();
    let matrix = build_radon_matrix(&geom);
    let model: SpectralModel = WindowedSpectra::synthetic_ct_default(50, 1e6).unwrap().into();
    let truth = make_pmma_phantom(grid).unwrap();
    let means = expected_counts_model(&matrix, &truth, &model).unwrap();
    let counts = sample_poisson(&means, 0).unwrap();
    let constraint = ConstraintSet::tv_nonneg(tv_norm(&truth).unwrap(), grid);
    let problem = Problem {
        matrix: &matrix,
        model: &model,
        counts: &counts,
        constraint: &constraint,
        truth: Some(&truth),
    };
    let x1 = Image::new_2d(Array1::from_elem(grid * grid, 0.5), grid).unwrap();
    let rule = step_size_rule(StepSizeRule::PositiveMeas, &matrix, &model).unwrap();
    println!("views={views} max_iters={max_iters} rule={rule:.3e}");

    let report = |name: &str, t0: Instant, r: polyct::Result<(Image, SolverTrace)>| match r {
        Ok((_, tr)) => println!(
            "{name}: rmse {:.4e} iters {} conv {} wall {:.1}s",
            tr.final_rmse.unwrap(),
            tr.iterations(),
            tr.converged,
            t0.elapsed().as_secs_f64()
        ),
        Err(e) => println!("{name}: FAILED {e}"),
    };

    if which == "all" || which == "exact" {
        for mult in [8.0, 20.0, 60.0] {
            let cfg = SolverConfig {
                step_size: StepSize::Explicit(rule * mult),
                max_iters,
                ..Default::default()
            };
            let t0 = Instant::now();
            report(&format!("EXACT {mult}x"), t0, exact_solve(&problem, &cfg, &x1));
        }
    }
    if which == "all" || which == "admm" {
        for rho in [1e5, 1e6] {
            let cfg = SolverConfig {
                step_size: StepSize::Explicit(rho),
                max_iters,
                ..Default::default()
            };
            let t0 = Instant::now();
            report(&format!("ADMM {rho:.0e}"), t0, admm_poisson_solve(&problem, &cfg, &x1));
        }
    }
}
