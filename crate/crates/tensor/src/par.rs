//! Data-parallel dispatch. With the `parallel` feature the heavy kernels fan
//! out over rayon; without it the same loops run sequentially. Every kernel
//! writes each output element from exactly one task with a fixed accumulation
//! order, so results are bit-identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f(chunk_index, chunk)` over disjoint mutable chunks of `out`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map indices `0..n` to `Vec<T>` preserving order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
