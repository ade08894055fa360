//! Hardware-aware neural architecture search for fixed-point 1D CNN
//! atrial fibrillation detectors.

pub mod cli;
pub mod cost;
pub mod data;
pub mod deploy;
pub mod fxp;
pub mod metrics;
pub mod nas;
pub mod nn;
pub mod train;
