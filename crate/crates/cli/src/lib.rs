//! Simulation, fitting and summarising from the command line. The binary is
//! a thin wrapper around [`commands`].

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use error::{CliError, Result};
