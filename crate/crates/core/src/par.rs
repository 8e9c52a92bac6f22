//! Data-parallel helpers with a sequential fallback.
//!
//! All parallelism in the crate funnels through this module. With the
//! `parallel` feature (default) the helpers fan out over rayon; without it
//! they run sequentially with identical results. Every call site splits work
//! into disjoint outputs or collects in index order, so results are
//! bit-identical in both modes and across thread schedules.

/// Maps `0..n` to a `Vec`, preserving index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f(chunk_index, chunk)` over disjoint mutable chunks of `buf`.
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Sequential twin of [`map_indexed`], kept callable in all configurations so
/// benchmarks can compare the two paths directly.
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Sequential twin of [`for_each_chunk_mut`].
pub fn for_each_chunk_mut_seq<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    debug_assert!(chunk > 0);
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
