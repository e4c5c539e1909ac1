// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command surface of the toy visual-editing pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

pub use commands::{execute, AttributeMode, Command};
pub use config::{parse_config, parse_config_str, RunConfig, RUN_ROOT_ENV};
pub use error::{CliError, CliResult};
