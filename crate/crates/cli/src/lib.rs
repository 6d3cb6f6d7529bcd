//! Harness library behind the `iia` binary: configuration, metric emission,
//! reference computation, and the experiment drivers.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod model_spec;
pub mod reference;
pub mod run;
pub mod swd;
