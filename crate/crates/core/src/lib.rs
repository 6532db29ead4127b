//! Surrogate models for plasma-etch trench profiles.
//!
//! The crate bundles a synthetic process oracle that produces ground-truth
//! profiles, a small reverse-mode autodiff engine, three transformer-based
//! predictors (an unconstrained baseline and two variants that accumulate
//! non-negative per-step etch), deep-ensemble training, and the experiment
//! harness that compares them.

pub mod dataset;
pub mod harness;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod parallel;
pub mod profile;
pub mod recipe;
pub mod training;

pub use error::{Error, Result};
