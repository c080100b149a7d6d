//! Spatial-temporal synchronous graph transformer (STSGT) for forecasting
//! multi-vertex count series, with its data pipeline, training loop,
//! metrics and reference baselines.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
