//! Constraint projections: the TV prox, the binary-searched TV-ball
//! projection, and Dykstra's algorithm on the TV-ball / nonnegativity
//! intersection.
//!
//! Run with: cargo run --release --example tv_projection

use ndarray::Array1;
use polyct::constraints::{
    dykstra_project, project_tv_ball, prox_tv, tv_norm, ConstraintSet,
};
use polyct::geometry::Image;
use polyct::rng::seeded;
use rand::Rng;

fn main() -> polyct::Result<()> {
    let side = 16;
    let mut rng = seeded(1);
    let noisy = Image::new_2d(
        Array1::from_iter((0..side * side).map(|_| rng.gen::<f64>() * 2.0 - 0.5)),
        side,
    )?;
    let tv_in = tv_norm(&noisy)?;
    println!("input TV = {tv_in:.3}");

    for lambda in [0.05, 0.5, 5.0] {
        let smoothed = prox_tv(&noisy, lambda)?;
        println!("prox_tv(lambda = {lambda:<4}): TV = {:.3}", tv_norm(&smoothed)?);
    }

    let tau = 0.3 * tv_in;
    let projected = project_tv_ball(&noisy, tau)?;
    println!(
        "tv-ball projection: tau = {tau:.3}, achieved TV = {:.3} (band 0.01)",
        tv_norm(&projected)?
    );

    // intersection with the nonnegative orthant via Dykstra
    let tv_ball = ConstraintSet::TvBall { tau, grid_side: side };
    let nonneg = ConstraintSet::NonNegOrthant;
    let feasible = dykstra_project(&noisy, &tv_ball, &nonneg, 1e-4)?;
    let min_entry = feasible.values.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "dykstra intersection: TV = {:.3}, min entry = {:.2e}",
        tv_norm(&feasible)?,
        min_entry
    );
    Ok(())
}
