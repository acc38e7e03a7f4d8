use epsakit_core::gradcheck::{cases, GradcheckReport, Scope};
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "EPSAKIT_THREADS";

/// Worker count: `EPSAKIT_THREADS` if set to a positive integer, else rayon's default.
pub fn thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn pool() -> Result<ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count() {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))
}

/// Runs the cases of `scope` concurrently; results keep the sequential order.
pub fn gradcheck(scope: Scope, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let cases = cases(scope, seed)?;
    let results = pool()?.install(|| {
        cases
            .par_iter()
            .map(|c| c.check(corrupt))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;
    Ok(GradcheckReport::from_results(scope, seed, results))
}
