//! Worker-pool control.
//!
//! `TCSAN_THREADS` bounds internal parallelism (0 or unset = automatic).
//! Parallel sections only ever compute independent per-item results that are
//! then combined in index order, so outputs are identical for any thread count.

use once_cell::sync::Lazy;
use rayon::prelude::*;

static POOL: Lazy<rayon::ThreadPool> = Lazy::new(|| {
    let n = std::env::var("TCSAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("failed to build worker pool")
});

/// Number of worker threads in the pool.
pub fn num_threads() -> usize {
    POOL.current_num_threads()
}

/// Order-preserving map, parallel when the pool has more than one thread.
pub fn maybe_par_map<T, U, Func>(items: Vec<T>, f: Func) -> Vec<U>
where
    T: Send,
    U: Send,
    Func: Fn(T) -> U + Send + Sync,
{
    if POOL.current_num_threads() <= 1 || items.len() <= 1 {
        items.into_iter().map(f).collect()
    } else {
        POOL.install(|| items.into_par_iter().map(f).collect())
    }
}
