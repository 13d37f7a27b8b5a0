//! Data-parallel helpers.
//!
//! Hot loops (per-sample gradients inside a batch, batch inference, synthetic
//! generation) go through [`map`]. With the `parallel` feature they fan out on
//! the rayon pool; without it, or when [`Execution::Sequential`] is requested,
//! they run in order on the calling thread. Results are always returned in
//! index order, and reductions over them are done sequentially by the caller,
//! so both modes produce bitwise-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// True when work will actually be spread across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map`] over a slice.
pub fn map_slice<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map(exec, items.len(), |i| f(&items[i]))
}
