//! Runtime switch between the sequential and the rayon data-parallel path.
//!
//! Every parallel loop in the crate maps over *disjoint output slices*; no
//! floating-point reduction ever depends on thread schedule, so the parallel
//! and sequential paths produce bit-identical results. The `parallel` cargo
//! feature compiles the rayon path in; `set_threads(1)` (the default) keeps
//! execution sequential at runtime either way.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the worker-thread budget. `1` forces the sequential path.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

#[inline]
fn parallel_active() -> bool {
    cfg!(feature = "parallel") && threads() > 1
}

/// Splits `data` into `chunk`-sized output slices and runs `f(i, slice)` on
/// each, in parallel when enabled.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_active() {
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

/// Order-preserving indexed map; results land at their own index.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
