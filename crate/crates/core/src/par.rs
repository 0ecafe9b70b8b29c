//! Chunked data-parallel helpers.
//!
//! Every helper splits work into chunks whose boundaries depend only on the
//! input sizes, never on the thread count, and combines results in index
//! order. With the `parallel` feature the chunks run on the rayon pool;
//! without it the same chunks run in a plain loop, so both builds produce
//! bitwise identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, returning results in index order.
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

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Calls `f(chunk_index, a_chunk, b_chunk)` on matching chunks of two slices.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        a.par_chunks_mut(a_len.max(1))
            .zip(b.par_chunks_mut(b_len.max(1)))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(a_len.max(1))
            .zip(b.chunks_mut(b_len.max(1)))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }
}

/// True when the crate was built with rayon-backed loops.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
