//! Library side of the `lanegrid` binary: experiment configuration and the
//! subcommand implementations, shared with the integration tests.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{DataConfig, EvalConfig, ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};

/// Environment variable fixing the size of the worker pool.
pub const THREADS_ENV: &str = "LANEGRID_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!("{THREADS_ENV}={value} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("{THREADS_ENV}: {e}")))
}
