//! Simulation designs, ground truth and the Monte-Carlo harness.

use thiserror::Error;

use crate::estimators::EstimatorError;

pub mod dgp;
pub mod study;
pub mod truth;

pub use dgp::{generate, truncated_normal_sample, DgpSpec, DiscreteDgp, Family};
pub use study::{monte_carlo_study, GridChoice, Method, SimulationReport, StudyConfig};
pub use truth::{efficiency_loss, intervention_oracle, true_psi, true_psi_mega_sample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown design `{0}`")]
    UnknownFamily(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("{failed} of {total} replications failed (first: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },
}
