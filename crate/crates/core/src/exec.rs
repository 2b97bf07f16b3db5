//! Data-parallel evaluation over examples.
//!
//! With the `parallel` feature, per-example work runs on a rayon pool;
//! without it everything runs on the calling thread. Results always come
//! back in input order, so reductions over them are bit-identical either
//! way.

/// How to schedule per-example work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is on; otherwise the
    /// same as `Sequential`.
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

/// Maps `f` over `items` with the default execution mode.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_with(Execution::default(), items, f)
}

pub fn map_with<T, R, F>(mode: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Execution::Parallel if items.len() > 1 => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Caps the global pool at `MULTIATTN_THREADS` threads if that variable is
/// set. Has no effect after the pool has started or without the `parallel`
/// feature. Returns the cap that was applied.
pub fn init_threads_from_env() -> Option<usize> {
    let n = std::env::var("MULTIATTN_THREADS").ok()?.parse::<usize>().ok()?;
    if n == 0 {
        return None;
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok()?;
    }
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..100).collect();
        let a = map_with(Execution::Parallel, &items, |x| x * x);
        let b = map_with(Execution::Sequential, &items, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }

    #[test]
    fn empty_input() {
        let items: Vec<u8> = vec![];
        assert!(map(&items, |x| *x).is_empty());
    }
}
