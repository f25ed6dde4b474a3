//! Forecasting toolkit for railway-axle vibration signals.
//!
//! Two probabilistic transformer forecasters share this crate: a time-domain
//! model with a ProbSparse distilling encoder, and a spectral model that works
//! on STFT grids with HiLo split-head attention, global frequency filtering,
//! reference-signal conditioning, and an exponential-variance sampling head.
//! Around them sit a synthetic crack-conditioned signal generator, spectral
//! tooling, a training and evaluation harness, and the monitoring tasks:
//! forecasting, missing-data imputation, and outlier detection.

pub mod attention;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod model;
pub mod spectral;
pub mod tasks;
pub mod training;

pub use error::{AxError, Result};
