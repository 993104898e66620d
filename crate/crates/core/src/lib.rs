//! Continual traffic forecasting over evolving sensor networks.
//!
//! The crate pairs a hybrid convolution–attention forecasting model with a
//! rehearsal-based continual training loop: when the sensor graph evolves,
//! only changed nodes and a small set of histogram-selected stable/unstable
//! nodes are retrained, with an elastic penalty anchoring parameters that
//! mattered for the previous period.

// Index loops mirror the matrix notation throughout the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod continual;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

/// Worker threads for parallel node scoring, from `EVOFORECAST_THREADS`.
/// Defaults to 1; every numeric path stays deterministic either way.
pub fn thread_count() -> usize {
    std::env::var("EVOFORECAST_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
