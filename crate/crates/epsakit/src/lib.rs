//! Std companion to `epsakit-core`: the `.t4` tensor container, the bundled
//! defaults file, history/summary writers, text reports and the CLI.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod error;
pub mod history;
pub mod parallel;
pub mod report;
pub mod t4;

pub use error::{Error, Result};
