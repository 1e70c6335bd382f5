//! Library surface of the experiment driver: configuration resolution,
//! subcommand bodies and analysis exports. The `metaprompter` binary is a
//! thin argument parser over these.

pub mod analysis;
pub mod config;
pub mod runner;
