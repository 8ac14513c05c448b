//! Data-parallel helpers that compile to plain loops without the `parallel`
//! feature. Every helper partitions work by index, so results do not depend
//! on the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many elements the sequential path is faster than a fork-join.
pub const MIN_PARALLEL_LEN: usize = 1 << 14;

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    {
        if data.len() >= MIN_PARALLEL_LEN {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Element-wise `out[i] = f(i)`-style update over a mutable slice.
pub fn for_each_mut<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if data.len() >= MIN_PARALLEL_LEN {
            data.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
            return;
        }
    }
    data.iter_mut().enumerate().for_each(|(i, v)| f(i, v));
}

/// Map `0..n` to a `Vec`, preserving order. Intended for coarse work items
/// (whole scenes, whole optimization runs) so there is no size threshold.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
