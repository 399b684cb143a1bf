//! Simulation and analysis toolkit for rephased amplified spontaneous
//! emission (RASE) quantum memories.
//!
//! The crate is layered bottom-up:
//!
//! - [`gaussian`]: covariance-matrix Gaussian states and channels.
//! - [`model`]: closed-form variance, efficiency and inseparability models.
//! - [`synth`]: Monte-Carlo heterodyne shot records and their dump format.
//! - [`estimators`]: demodulation, phase correction and variance estimation.
//! - [`analysis`]: loss fits, efficiency curves and inseparability estimates.

pub mod analysis;
pub mod error;
pub mod estimators;
pub mod gaussian;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
