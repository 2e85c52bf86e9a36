//! Execution helpers: data-parallel loops under the `parallel` feature,
//! plain iteration otherwise. Every kernel routed through here computes each
//! output chunk from a fixed-order reduction, so results are bit-identical
//! across thread counts and with the feature disabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to consecutive `chunk`-sized pieces of `data`, in parallel
/// when enabled.
pub(crate) fn for_chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_chunks_mut_seq(data, chunk, f);
    }
}

/// Always-sequential variant of [`for_chunks_mut`]; the reference execution
/// order that the parallel path must reproduce exactly.
pub(crate) fn for_chunks_mut_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
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
