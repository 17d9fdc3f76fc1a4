//! Joint message detection and channel estimation for location-based
//! unsourced random access in cell-free networks.
//!
//! The pipeline runs a multi-source matrix AMP over stacked per-location
//! codebooks, tracks it with state evolution, detects active messages with a
//! Neyman–Pearson test whose error probabilities come from a Laplace inversion,
//! and evaluates the downlink acknowledgement rates that the resulting channel
//! estimates support.

pub mod amp;
pub mod denoiser;
pub mod detection;
pub mod downlink;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod linalg;
mod mc;
pub mod model;
pub mod rng;
pub mod state_evolution;

pub use error::{Error, Result};
pub use linalg::{Hermitian, C64};
pub use mc::ScalarMoments;
