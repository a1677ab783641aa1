//! Pluggable execution of independent per-sample work.

use alloc::vec::Vec;

/// Runs `n` independent jobs and returns their results in index order.
/// Implementations may use threads; callers only rely on the ordering,
/// so results are identical to [`Sequential`].
pub trait Executor: Sync {
    fn map<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..n).map(f).collect()
    }
}
