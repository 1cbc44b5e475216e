//! Thin shims over rayon so the crate still builds without threads (wasm).
//!
//! Every helper returns results in index order, so callers observe the same
//! output whatever the pool size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn map_range<T, F>(n: usize, f: F) -> Vec<T>
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

pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub(crate) fn map_chunks<T, U, F>(data: &[T], chunk: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &[T]) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
    }
}

/// Number of worker threads the current pool would use.
pub(crate) fn workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
