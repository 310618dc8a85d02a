//! Worker-pool sizing for the parallel kernels.
//!
//! Kernels only parallelize over disjoint outputs and reduce in a fixed
//! order, so results do not depend on the thread count. The pool size is
//! read from `TETRA_THREADS`; deterministic mode pins it to one thread.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "TETRA_THREADS";

/// Threads to use given the environment and the deterministic flag.
pub fn thread_count(deterministic: bool) -> Result<Option<usize>> {
    if deterministic {
        return Ok(Some(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

/// Sizes the global pool. Only the first call in a process takes effect.
pub fn configure(deterministic: bool) -> Result<()> {
    if let Some(n) = thread_count(deterministic)? {
        // A second initialization fails harmlessly; the first size stays.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
