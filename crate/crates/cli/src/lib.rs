//! Library half of the `demandkit` binary: config loading, commands and
//! output staging. Kept separate so the tests can drive commands in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
