//! File formats, dataset loaders and the command-line front end for the
//! `ars-core` simulator.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod idx;
pub mod manifest;
pub mod tabular;

pub use error::CliError;
