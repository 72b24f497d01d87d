//! Command-line front end: problem files in, reports and CSV out.

pub mod commands;
pub mod problem;
pub mod report;

pub use commands::{run, Cli, CliError, Command, Format, Outcome, Status};
