//! Scenario loading, the closed simulation loop, run export and the
//! command-line front end.

pub mod cli;
pub mod export;
pub mod run;
pub mod scenario;

pub use run::{min_separation, run, RunFailure, RunLog, SafetyReport, StepRecord};
pub use scenario::{load_scenario, RunMode, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Validation(scenario::ValidationErrors),
    #[error(transparent)]
    Core(#[from] upf_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
}

impl SimError {
    /// Process exit code: 2 invalid input, 3 numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use upf_core::Error as E;
        match self {
            SimError::Parse(_) | SimError::Validation(_) => 2,
            SimError::Core(E::InvalidParameter { .. }) | SimError::Core(E::GridMismatch) => 2,
            SimError::Core(
                E::NoConvergence { .. } | E::Unstable { .. } | E::Stalled { .. } | E::NonFinite(_) | E::Factorization(_),
            ) => 3,
            _ => 1,
        }
    }
}
