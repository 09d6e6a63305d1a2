//! Command-line and HTTP front ends for the `cocon` crate.

pub mod cli;
pub mod config;
pub mod http;
pub mod lock;
