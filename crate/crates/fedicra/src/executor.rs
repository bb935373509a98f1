//! Site-level parallelism on a rayon pool.

use fedicra_core::federation::SiteExecutor;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs sites on a dedicated pool, or inline when built with one thread.
pub struct Executor {
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    /// `threads == 1` is sequential; `0` lets rayon pick the core count.
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 1 {
            return Ok(Self { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
        Ok(Self { pool: Some(pool) })
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }
}

impl SiteExecutor for Executor {
    fn map_sites<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_site_order() {
        let ex = Executor::new(3).unwrap();
        let out = ex.map_sites(17, |k| k * k);
        assert_eq!(out, (0..17).map(|k| k * k).collect::<Vec<_>>());
        assert_eq!(Executor::new(1).unwrap().threads(), 1);
    }
}
