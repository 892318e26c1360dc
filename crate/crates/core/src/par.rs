//! Data-parallel dispatch.
//!
//! With the `parallel` feature (default) these helpers fan work out over rayon's
//! pool; without it, or after [`set_enabled(false)`](set_enabled), the same
//! closures run sequentially. Every helper writes disjoint outputs or returns
//! per-index results in index order, so results never depend on the thread count.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many scalar elements a kernel stays on the calling thread.
pub const MIN_PARALLEL_LEN: usize = 1 << 14;

/// Runtime switch between the parallel and the sequential path.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if enabled() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] but over two buffers chunked in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    let (a_len, b_len) = (a_len.max(1), b_len.max(1));
    #[cfg(feature = "parallel")]
    if enabled() && a.len() > a_len {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Elementwise map of `src` into a fresh vector.
pub fn map_slice<T, R, F>(src: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send + Copy + Default,
    F: Fn(T) -> R + Sync + Send,
    T: Copy,
{
    let mut out = vec![R::default(); src.len()];
    let chunk = chunk_for(src.len());
    for_each_chunk_mut(&mut out, chunk, |ci, o| {
        let base = ci * chunk;
        for (j, v) in o.iter_mut().enumerate() {
            *v = f(src[base + j]);
        }
    });
    out
}

/// Elementwise map over two equal-length slices.
pub fn zip_map_slice<T, R, F>(a: &[T], b: &[T], f: F) -> Vec<R>
where
    T: Sync + Copy,
    R: Send + Copy + Default,
    F: Fn(T, T) -> R + Sync + Send,
{
    debug_assert_eq!(a.len(), b.len());
    let mut out = vec![R::default(); a.len()];
    let chunk = chunk_for(a.len());
    for_each_chunk_mut(&mut out, chunk, |ci, o| {
        let base = ci * chunk;
        for (j, v) in o.iter_mut().enumerate() {
            *v = f(a[base + j], b[base + j]);
        }
    });
    out
}

fn chunk_for(len: usize) -> usize {
    if enabled() && len >= MIN_PARALLEL_LEN {
        MIN_PARALLEL_LEN / 4
    } else {
        len.max(1)
    }
}
