//! Command-line driver: configuration, file formats and the commands of the
//! `xfmamba` binary.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsio;

pub use error::{CliError, Result};
