//! Command-line harness for suvlab experiments.
//!
//! Exit status: 0 when every statistical gate passes, 1 when a gate fails,
//! 2 for configuration errors and 3 for runtime or numeric failures.

use std::path::Path;

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, parse_config_str, Format, RunConfig, Subcommand};
pub use output::{Gate, RunManifest};
pub use run::run;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_GATE_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Model(#[from] suvlab::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Worker count from `SUVLAB_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("SUVLAB_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "SUVLAB_THREADS: expected a positive integer, got `{raw}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}
