//! Preparedness and evacuation signals from device location traces.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod evacuation;
pub mod geo;
pub mod ingest;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod trajectory;
pub mod visits;

pub use error::{Error, Result};
