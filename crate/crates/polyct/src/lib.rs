//! Spectral CT simulation and reconstruction with a projected-extragradient
//! solver for the polychromatic forward model.
//!
//! The measurement model is photon-counting CT: along ray i the detector
//! records counts with mean I * sum_j s_j exp(-mu_j <a_i, x>), where the
//! calibrated spectrum (s_j, mu_j, I) is polychromatic and x is the unknown
//! material image. Reconstruction is posed as a variational inequality for
//! the monotone residual operator F and solved by the two-projection
//! extragradient iteration under convex constraints (TV ball intersected
//! with the nonnegative orthant, or l2 balls). Loss-minimization baselines
//! (squared-loss gradient descent, Polyak subgradient on the absolute loss,
//! ADMM on the Poisson likelihood), constraint projections with Dykstra's
//! algorithm, and the quantities of the convergence analysis are included,
//! along with batch experiment drivers.
//!
//! Entry points:
//! - [`model`]: spectra, expected counts, noise sampling, reparameterization
//! - [`geometry`]: Radon/Gaussian system matrices and phantoms
//! - [`constraints`]: TV/nonnegativity/ball projections and Dykstra
//! - [`solvers`]: the extragradient solver and the three baselines
//! - [`theory`]: step-size rules, envelopes, widths, error bounds
//! - [`experiments`]: reproducible sweep drivers used by the `polyct` binary
//!
//! The `examples/` directory holds one runnable example per capability.

pub mod constraints;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod solvers;
pub mod theory;

pub use error::{Error, Result};
