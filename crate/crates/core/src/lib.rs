//! Covariate-adjusted threshold-response estimation.
//!
//! The estimand is `ψ_v = E_W E[Y | A ≥ v, W]`: the covariate-adjusted mean
//! outcome among subjects whose biomarker `A` is at or above threshold `v`,
//! with possibly missing outcomes (`Δ = 0`) and possibly unmeasured biomarkers
//! (`R = 0`, handled by inverse-probability weighting).
//!
//! Modules, bottom up:
//! - [`dataset`]: ingestion and validation, threshold grids
//! - [`regress`]: weighted logistic/linear regression and spline bases
//! - [`nuisance`]: `g_v`, `Q`, `Q_v`, `G`, `G_v` and sampling weights
//! - [`estimators`]: Donovan NPMLE, binTMLE, srTMLE, IPW-srTMLE
//! - [`inference`]: Wald intervals, EIF covariance, simultaneous bands, tests
//! - [`sims`]: data-generating processes and the Monte-Carlo harness

pub mod dataset;
pub mod estimators;
pub mod inference;
pub mod nuisance;
pub mod pipeline;
pub mod regress;
pub mod sims;
pub mod stats;

pub use dataset::{CsvSchema, Dataset, Observation, OutcomeKind, ThresholdGrid};
pub use estimators::{EstimatorTag, ThresholdEstimate};
pub use inference::ThresholdCurve;
