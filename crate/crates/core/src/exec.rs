//! Work distribution for read-only evaluation over many queries.

use alloc::vec::Vec;

/// Maps a function over items. Implementations must return results in
/// input order so reductions are identical for any worker count.
pub trait Executor {
    fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync,
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}
