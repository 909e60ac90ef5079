//! Data-parallel dispatch.
//!
//! With the `parallel` feature the batch-level loops fan out over rayon;
//! without it (or after `set_parallel(false)`) the same closures run
//! sequentially. Work is only ever split across *independent* outputs and
//! every reduction keeps a fixed order, so results are bitwise identical
//! whichever path runs.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch, honored only when the `parallel` feature is compiled in.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f(chunk_index, chunk)` to consecutive chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map `0..n` through `f`, preserving index order in the output.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
