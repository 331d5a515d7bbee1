//! Solar-forecasting training laboratory: SUNSET-family models over a
//! deterministic data pipeline, with local / global / transfer training
//! strategies and an evaluation + reporting layer. Real deployments feed
//! the documented dataset directory layout; the bundled synthetic
//! generator stands in for multi-site data at desk scale.

pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod report;
pub mod rundir;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
