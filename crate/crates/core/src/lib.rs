//! Exact diagnostics for controllable user simulators on finite interaction
//! environments: look-ahead bias of post-hoc labels, density-ratio variance
//! under policy shift, and the conditioning schemes that avoid both.

pub mod analysis;
pub mod beliefs;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod estimation;
pub mod fixtures;
pub mod labeling;
pub mod report;
pub mod simulators;

pub use error::{Error, Result};
