//! Factor analysis of moving-average processes.
//!
//! The pipeline estimates a PSD spectral density from samples, then splits
//! it into a low-rank part (common factors) plus a diagonal part (specific
//! factors) by minimizing the trace of the low-rank part over a block-Gram
//! parametrization.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod estimation;
pub mod gram;
pub mod linalg;
pub mod model;
pub mod pseudopoly;
pub mod solver;

pub use error::{Error, Result};
