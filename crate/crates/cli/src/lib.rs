//! File formats and subcommands of the `source` command-line tool.

pub mod cohort;
pub mod commands;
pub mod format;
