//! Command implementations behind the `sodkit` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod selftest;

pub use error::{CliError, Result};
