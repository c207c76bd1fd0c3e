//! Covariate adjustment for randomized experiments with missing outcomes and
//! missing covariates: inverse-probability-weighted, regression, propensity
//! and doubly robust estimators, sandwich and bootstrap variances, and a
//! Monte Carlo harness.

pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod linalg;
pub mod missing;
pub mod rng;
pub mod simulation;
pub mod variance;

pub use data::Dataset;
pub use error::{Error, Result};
pub use estimators::{Analysis, EstimateResult, EstimatorConfig, Method, PModelDesign};
pub use missing::{CovariateSelector, PartialCovariates};
