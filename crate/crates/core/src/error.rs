use alloc::boxed::Box;

use thiserror::Error;

use crate::control::TrajectoryPlan;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix factorization failed: {0}")]
    Factorization(&'static str),
    #[error("point ({s:.3}, {d:.3}) lies outside the field domain")]
    OutOfDomain { s: f64, d: f64 },
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("Cahn-Hilliard evolution diverged at step {step} (|phi|_inf = {max_abs:.3e}); reduce tau_step")]
    Unstable { step: usize, max_abs: f64 },
    #[error("grid mismatch between fields")]
    GridMismatch,
    #[error("best response stalled after {sweeps} sweeps without cost decrease (update norm {update_norm:.3e})")]
    Stalled {
        sweeps: usize,
        update_norm: f64,
        best: Box<TrajectoryPlan>,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: &'static str) -> Self {
        Error::InvalidParameter { name, reason }
    }
}
