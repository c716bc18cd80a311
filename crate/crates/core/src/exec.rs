//! Order-preserving fan-out. Results always come back in input order, so
//! any reduction the caller performs afterwards has a fixed order.

use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
pub fn map_indexed<R, F>(jobs: usize, n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F>(jobs: usize, n: usize, f: F) -> Result<Vec<R>>
where
    F: Fn(usize) -> Result<R>,
{
    if jobs > 1 {
        return Err(Error::Config("built without parallel support".into()));
    }
    (0..n).map(f).collect()
}
