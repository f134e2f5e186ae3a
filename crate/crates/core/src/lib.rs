//! Data-diversity scaling lab for map-free point-goal navigation.

pub mod analysis;
pub mod curation;
pub mod error;
pub mod evalharness;
pub mod exec;
pub mod experiment;
pub mod expert;
pub mod geokit;
pub mod policy;
pub mod posegraph;
pub mod simworld;

pub use error::{Error, Result};
