//! File formats, dataset assembly and commands around `msn_core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod scenefile;
pub mod svg;
pub mod trajfile;

pub use config::RunConfig;
pub use error::{Error, Result};
