//! Artificial finite populations from survey samples plus complete
//! unit-level auxiliary data, and design-based simulation studies for
//! comparing small area estimators on them.
//!
//! The pipeline: impute a full population by bootstrap-weighted k-nearest-
//! neighbor donation within strata, draw replicate samples under a
//! one-unit-per-cluster design, fit direct, regression-assisted, and
//! mixed-model estimators per replicate, and aggregate replicates into
//! calibration metrics and population diagnostics.

pub mod datamodel;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod fixture;
pub mod imputer;
pub mod knn;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
