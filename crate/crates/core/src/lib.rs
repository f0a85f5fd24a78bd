//! Two-branch speech enhancement: signal front-end, network blocks, the
//! model itself, data synthesis, metrics and the training driver.

pub mod blocks;
pub mod data;
pub mod dsp;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
