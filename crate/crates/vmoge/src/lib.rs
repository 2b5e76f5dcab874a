//! Command-line front end: CSV and container IO, run directories and the `vmoge` binary.

pub mod cli;
pub mod config;
pub mod container;
pub mod csvio;
pub mod error;
pub mod run;
