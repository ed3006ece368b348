//! Scenario data model, on-disk format, synthetic generator, and filter.

pub mod filter;
pub mod format;
pub mod generate;
pub mod types;

pub use generate::{generate_scenario, Kind};
pub use types::*;
