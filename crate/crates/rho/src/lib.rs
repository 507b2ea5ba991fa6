//! File formats, synthetic data, configuration and pipeline stages around
//! [`rho_core`].

pub mod formats;
pub mod synth;
pub mod config;
pub mod stages;
