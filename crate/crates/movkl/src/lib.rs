//! File formats, reports and the command-line front end for `movkl-core`.
//!
//! - [`dataset`]: the `movkl-dataset v1` text format and a feature CSV importer.
//! - [`archive`]: the versioned JSON model archive.
//! - [`config`]: the TOML run configuration.
//! - [`report`]: JSON and CSV report schemas.
//! - [`commands`]: `gen`, `train`, `predict`, `eval`, `cv` and `bench`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;

pub use error::{CliError, Result};
