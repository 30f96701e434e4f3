use kgseq_core::exec::Executor;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{AppError, AppResult};

/// Evaluation fan-out on a dedicated rayon pool. Results come back in
/// input order, so metrics do not depend on the worker count.
pub struct RayonExecutor {
    pool: ThreadPool,
}

impl RayonExecutor {
    pub fn new(workers: usize) -> AppResult<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| AppError::Config(format!("cannot start {workers} workers: {e}")))?;
        Ok(RayonExecutor { pool })
    }
}

impl Executor for RayonExecutor {
    fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync,
    {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kgseq_core::exec::Serial;

    #[test]
    fn order_matches_serial() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |i: usize, x: &u64| (i as u64) * 31 + x * x;
        assert_eq!(RayonExecutor::new(4).unwrap().map(&items, f), Serial.map(&items, f));
    }
}
