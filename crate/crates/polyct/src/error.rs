use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violated a documented invariant. The message names the
    /// offending field (and index, for array-valued fields).
    #[error("validation: {0}")]
    Validation(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An iterative routine hit its iteration cap before reaching tolerance.
    #[error("{what} did not converge after {iters} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    /// A solver iterate blew up or turned non-finite.
    #[error("{solver} diverged at iteration {iter} (iterate norm {norm:.3e})")]
    Divergence {
        solver: &'static str,
        iter: usize,
        norm: f64,
    },

    /// PolyakSGM produced a zero subgradient while the loss is still above
    /// the oracle value; the method cannot make further progress.
    #[error("subgradient stall at iteration {iter}: loss {loss:.6e} above oracle {oracle:.6e}")]
    SubgradientStall { iter: usize, loss: f64, oracle: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
