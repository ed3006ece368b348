//! Multi-agent trajectory prediction with inverse-learning attention.
//!
//! The crate provides a small dense-array autodiff engine, a synthetic
//! driving-scenario generator, a query-centric two-stage prediction model
//! with dynamic anchor selection, training and evaluation loops, and a
//! metric suite, all in plain Rust.

pub mod ablate;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod plot;
pub mod runner;
pub mod scene;

pub use error::{Error, Result};
