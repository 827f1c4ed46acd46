//! Deterministic random number generation.
//!
//! All randomness in the crate flows through a ChaCha8 stream (a counter-based
//! generator) seeded explicitly per use site, so any run is bit-reproducible
//! from its seed. Poisson variates are drawn with a pinned algorithm — CDF
//! inversion for small means, the PTRS transformed-rejection method of
//! Hörmann for large ones — rather than whatever a distribution crate happens
//! to ship, so the sampled counts cannot drift across dependency upgrades.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

/// Mean below which Poisson sampling uses CDF inversion; PTRS is used above.
const POISSON_INVERSION_CUTOFF: f64 = 30.0;

/// Fresh deterministic generator for the given seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One Poisson draw with the given mean.
///
/// Means below [`POISSON_INVERSION_CUTOFF`] use product-of-uniforms inversion;
/// larger means use PTRS rejection. Requires `mean >= 0` and finite.
pub fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    debug_assert!(mean.is_finite() && mean >= 0.0);
    if mean == 0.0 {
        return 0;
    }
    if mean < POISSON_INVERSION_CUTOFF {
        poisson_inversion(rng, mean)
    } else {
        poisson_ptrs(rng, mean)
    }
}

fn poisson_inversion(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let limit = (-mean).exp();
    let mut k = 0u64;
    let mut product: f64 = rng.gen::<f64>();
    while product > limit {
        k += 1;
        product *= rng.gen::<f64>();
    }
    k
}

/// PTRS: Poisson transformed rejection with squeeze (Hörmann, 1993).
fn poisson_ptrs(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let log_mean = mean.ln();
    let b = 0.931 + 2.53 * mean.sqrt();
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.gen::<f64>() - 0.5;
        let v = rng.gen::<f64>();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let accept = (v * inv_alpha / (a / (us * us) + b)).ln();
        if accept <= k * log_mean - mean - ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}
