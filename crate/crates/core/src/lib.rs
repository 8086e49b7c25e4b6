//! Detection of structural expansion in time series of per-pixel
//! class-probability maps.
//!
//! The pipeline turns multi-band scene stacks into probability maps
//! ([`spectral`]), fits a before/after footprint model by maximum likelihood
//! ([`footprint`], [`detector`]) and ranks locations by the delta
//! log-likelihood between the expansion model and a static one. Scalar
//! changepoint baselines ([`baselines`]), the evaluation metrics
//! ([`evaluation`]) and a synthetic benchmark with ground truth
//! ([`synthgen`]) complete the toolkit.

mod ascent;
pub mod baselines;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod footprint;
pub mod report;
pub mod scene_store;
pub mod spectral;
pub mod synthgen;

pub use error::{Error, Result};
