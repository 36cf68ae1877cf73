//! Files, configuration and experiment orchestration around `cdrec-core`.

pub mod config;
pub mod harness;
pub mod io;

pub use config::RunConfig;
