//! Detection of localized ground deformation in sparse InSAR velocity fields.
//!
//! The crate densifies scattered line-of-sight velocity measurements with a
//! matrix-completion interpolator, trains a small patch classifier on
//! physically synthesized deformation scenes, and scans full velocity maps
//! with a wrap/offset ensemble detector.

pub mod classifier;
pub mod covariogram;
pub mod dataset;
pub mod grid;
pub mod interp;
pub mod pipeline;
pub mod synth;
pub mod wrapping;

mod error;

pub use error::{Error, Result};
