//! Neural configuration Euclidean distance fields (N-CEDF) for multi-link
//! continuum robots, with an MPPI controller for reactive navigation in
//! point-cloud-observed dynamic environments.
//!
//! The pipeline:
//! 1. [`kinematics`] — piecewise-constant-curvature geometry and arc-length
//!    dynamics.
//! 2. [`datagen`] — brute-force distance datasets and analytic oracles.
//! 3. [`neural`] — a small softplus MLP trained with distance, Eikonal and
//!    overestimation losses.
//! 4. [`cedf`] — composition of per-link distance fields through the
//!    kinematic chain.
//! 5. [`mppi`] — sampling-based model-predictive control over arc-length
//!    rates.
//! 6. [`simulator`] — dynamic sphere environments, ground-truth clearance,
//!    baseline shape representations, and benchmark aggregation.
//! 7. [`cli`] — command implementations behind the `ncedf` binary.

pub mod cedf;
pub mod cli;
pub mod datagen;
pub mod kinematics;
pub mod mppi;
pub mod neural;
pub mod rng;
pub mod simulator;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("control violates per-link zero-mean projection by {0:e}")]
    UnprojectedControl(f64),
    #[error("geometry mismatch between model file and scenario: {0}")]
    GeometryMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
