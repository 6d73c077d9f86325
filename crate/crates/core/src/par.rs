//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it the same closures run on the calling thread. Both paths
//! return results in input order, so any reduction over the output is
//! bitwise identical regardless of thread count.

/// Maps `f` over `items`, keeping input order in the output.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if items.len() < 2 || rayon::current_num_threads() < 2 {
        return items.iter().map(f).collect();
    }
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_sequential(items, f)
}

/// Sequential reference path, always available (benchmarks compare the two).
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Number of worker threads `map` will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Configures the global pool. `0` keeps the rayon default (one per core).
/// Returns false when the pool was already initialised.
pub fn init_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if n > 0 {
            builder = builder.num_threads(n);
        }
        builder.build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}
