//! Indexed data-parallel maps with a sequential fallback.
//!
//! Results are always returned in index order, so callers get identical
//! output whether or not the `parallel` feature is enabled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// Parallel when built with the `parallel` feature, sequential otherwise.
    #[default]
    Auto,
    Sequential,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Auto
    }
}

/// `(0..n).map(f)` collected in order, fanned out when parallel.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] over a slice.
pub fn map_slice<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(usize, &I) -> T + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(i, &items[i]))
}

/// Fallible map; the first error by index wins.
pub fn try_map_indexed<T, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}

/// Worker count used by the current execution mode.
pub fn workers(exec: Execution) -> usize {
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return rayon::current_num_threads();
    }
    let _ = exec;
    1
}

/// Well-known stream ids so independent consumers of one seed never overlap.
pub mod streams {
    pub const LAYOUT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const INIT: u64 = 3;
    pub const DATASET: u64 = 4;
    pub const EVAL: u64 = 5;
    /// Training step `n` uses stream `TRAIN_BASE + n`.
    pub const TRAIN_BASE: u64 = 1 << 32;
}

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn order_is_preserved() {
        let a = map_indexed(Execution::Auto, 100, |i| i * i);
        let b = map_indexed(Execution::Sequential, 100, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = rng_for(5, 1).gen();
        let b: u64 = rng_for(5, 2).gen();
        let c: u64 = rng_for(5, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(Execution::Auto, 10, |i| if i % 4 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
