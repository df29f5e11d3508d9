//! Paired electrophysiology/hemodynamics toolkit: simulation, conjugate-domain
//! alignment, conditional diffusion generation and evaluation.

pub mod error;
pub mod fairness;
pub mod hyperalign;
pub mod metrics;
pub mod nngen;
pub mod rng;
pub mod signal;
pub mod simdata;

pub use error::{Error, Result};
