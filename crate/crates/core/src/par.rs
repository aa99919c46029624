//! Thin wrappers over rayon for the compute kernels.
//!
//! Every parallel loop here assigns each output chunk to exactly one task and
//! accumulates within a chunk sequentially, so results are bit-identical to
//! the single-threaded loop regardless of thread count.

use rayon::prelude::*;

/// Work (in multiply-accumulates, roughly) below which spawning tasks costs
/// more than it saves.
const PAR_THRESHOLD: usize = 64 * 1024;

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of
/// `out`, in parallel when `work_hint` is large enough.
pub fn for_each_chunk<F>(out: &mut [f32], chunk_len: usize, work_hint: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    debug_assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    if work_hint < PAR_THRESHOLD || out.len() <= chunk_len {
        for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
    } else {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}

/// Parallel map over an index range producing one value per index.
pub fn map_indices<T, F>(n: usize, work_hint: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if work_hint < PAR_THRESHOLD {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Build a scoped thread pool with `threads` workers and run `f` inside it.
/// Used by the decode benchmark to pin algorithm timings to a thread count.
pub fn with_thread_count<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}
