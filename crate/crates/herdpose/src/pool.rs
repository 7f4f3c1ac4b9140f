//! Bounded worker pool. Its size comes from `HERDPOSE_WORKERS`, falling back
//! to the available parallelism. Every parallel stage collects results in
//! input order, so outputs do not depend on the worker count.

use crate::error::{Error, Result};

pub const WORKERS_ENV: &str = "HERDPOSE_WORKERS";

pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run_in_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
