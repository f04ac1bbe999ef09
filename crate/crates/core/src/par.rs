//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool;
//! without it (or after [`set_parallel(false)`](set_parallel)) they run as
//! plain loops. Work is always split into disjoint items and reduced in
//! index order, so both paths produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Toggle parallel execution at runtime. Has no effect when the crate is
/// built without the `parallel` feature.
pub fn set_parallel(on: bool) {
    ENABLED.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Evaluate `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk {
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
