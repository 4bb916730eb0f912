//! IO, configuration, file formats and the `dfa` command line around
//! `dfa-core`.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod run;
pub mod sweep;

pub use error::{Error, Result};
