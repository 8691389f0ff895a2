//! Order-preserving data-parallel map over an index range, with a sequential
//! twin used by benchmarks and by callers that must stay on one thread.
//!
//! With the default `parallel` feature the indexed map runs on the rayon pool;
//! without it the same function compiles to a plain sequential loop. Output
//! order always matches index order, so downstream reductions performed
//! sequentially over the returned vector are deterministic either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every index in `0..n` and collects results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
