//! Data-parallel helpers.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it, or with [`Parallelism::Sequential`], the same closures run in
//! order on the calling thread. Results are collected in index order either
//! way, so callers get bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// Whether work will actually be distributed.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indices<T, F>(par: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Maps over `chunk`-sized index ranges `[start, end)` and concatenates.
pub fn map_chunks<T, F>(par: Parallelism, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> Vec<T> + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    map_indices(par, n_chunks, |c| {
        let start = c * chunk;
        f(start, (start + chunk).min(n))
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Sum of `f(i)` for `i in 0..n`. Partial sums are reduced in a fixed
/// blocked order so the result does not depend on scheduling.
pub fn sum_indices<F>(par: Parallelism, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    const BLOCK: usize = 64;
    map_chunks(par, n, BLOCK, |s, e| vec![(s..e).map(&f).sum::<f64>()])
        .into_iter()
        .sum()
}
