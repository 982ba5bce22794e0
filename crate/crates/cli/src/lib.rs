//! Library side of the `s2wat` command: configuration, data handling and the
//! subcommand implementations.

pub mod cli;
pub mod config;
pub mod data;
pub mod failure;
pub mod infer;
pub mod tools;
pub mod train;

pub use config::RunConfig;
pub use failure::{ExitKind, Failure};
