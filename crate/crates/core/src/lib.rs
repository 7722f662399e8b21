#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod checkpoint;
pub mod checks;
pub mod compute;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gating;
pub mod metrics;
pub mod model;
pub mod pruner;
pub mod trainer;

pub use error::{Error, Result};
