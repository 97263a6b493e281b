//! Command line and listening-test service for the `vocalsim` library.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod server;

pub use commands::{run, Cli, Command};
pub use manifest::RunManifest;
