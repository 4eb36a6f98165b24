//! Library half of the `pvd` command line: configuration schema, command
//! implementations, CSV emission, and SVG rendering. The binary in
//! `main.rs` only parses arguments and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod plot;
