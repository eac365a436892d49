//! Per-cell data-parallel helpers.
//!
//! With the `parallel` feature (default) the cell loops run on rayon; without
//! it, or with [`Execution::Sequential`], they run in order on the calling
//! thread. Every helper writes results into pre-assigned output slots, so the
//! output is identical for both modes and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Calls `f(k, chunk)` for every `chunk_len`-sized chunk of `out`.
pub fn for_each_chunk<F>(exec: Execution, out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => out
            .par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(k, c)| f(k, c)),
        _ => out.chunks_mut(chunk_len).enumerate().for_each(|(k, c)| f(k, c)),
    }
}

/// Like [`for_each_chunk`], with a scratch value built once per worker.
pub fn for_each_chunk_init<S, I, F>(exec: Execution, out: &mut [f64], chunk_len: usize, init: I, f: F)
where
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => out
            .par_chunks_mut(chunk_len)
            .enumerate()
            .for_each_init(&init, |s, (k, c)| f(s, k, c)),
        _ => {
            let mut s = init();
            out.chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(k, c)| f(&mut s, k, c))
        }
    }
}

/// Order-preserving map over `0..n`.
pub fn map_indices<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Sizes the global worker pool. Returns false if the pool was already built
/// or the crate was compiled without the `parallel` feature.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (inline without `parallel`).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
