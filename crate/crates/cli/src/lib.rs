//! Command-line front end for `qfm-core`: data and draw files, run
//! configuration, and the `simulate`, `fit`, `qcor`, `compare` and `diagnose`
//! commands.
//!
//! Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical failure, 5 IO.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod summary;

pub use args::{Cli, Command};
pub use commands::run;
pub use error::{CliError, CliResult};
