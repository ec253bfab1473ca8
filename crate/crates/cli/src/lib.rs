//! Command-line front end for the `meritluck` simulation library.

pub mod checks;
pub mod commands;
pub mod config;
pub mod output;
