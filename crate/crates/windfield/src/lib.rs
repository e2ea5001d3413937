//! Reconstruction of a gridded wind-speed field from irregular station
//! time series, distribution-free uncertainty quantification, and
//! propagation to wind-power potential.
//!
//! The pipeline decomposes the station-by-time matrix into temporal basis
//! functions and spatial coefficient maps, interpolates each coefficient
//! map with a regularized extreme-learning-machine ensemble, estimates
//! model and prediction variance from the ensembles, and converts speed
//! and variance to turbine power via the log-law and a logistic power
//! curve.

pub mod config;
pub mod data;
pub mod elm;
pub mod eof;
pub mod error;
pub mod grid;
pub mod persist;
pub mod power;
pub mod siting;
pub mod st_model;
pub mod synth;
pub mod terrain;

pub use error::{Result, WindError};
