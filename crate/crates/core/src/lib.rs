//! Distributed maximum-likelihood inference for a common parameter under
//! site-specific nuisance parameters, using surrogate efficient scores
//! built from density-ratio tilting at a single local site.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod fednet;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod score;
pub mod simlab;
pub mod solver;

pub use data::SiteDataset;
pub use error::{Error, Result};
pub use estimators::{EstimateReport, EstimatorConfig, Method, WeightScheme};
pub use fednet::Network;
pub use model::{FamilyKind, ModelFamily, Observation, ParameterPartition};
