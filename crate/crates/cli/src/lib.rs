//! Command-line pipelines over the `geomatch` library: synthetic data,
//! benchmark construction, matching, alignment, evaluation, training and
//! pose prediction, with every output stamped by config hash and seed.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod render;
pub mod store;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::Context;

pub const THREADS_ENV: &str = "GEOMATCH_THREADS";

/// Caps the worker pool at `GEOMATCH_THREADS` when set. Sequential builds
/// only validate the value.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}
