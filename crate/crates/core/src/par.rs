//! Indexed trial runner.
//!
//! Every trial derives its randomness from its own index, so results are
//! identical whether trials run on the rayon pool or sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(0..n)` and collects results in index order.
#[cfg(feature = "parallel")]
pub fn map_trials<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_trials<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    map_trials_sequential(n, f)
}

/// Always sequential; kept public for benchmarking against [`map_trials`].
pub fn map_trials_sequential<T, F>(n: u64, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..n).map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: u64| i.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 7;
        assert_eq!(map_trials(1000, f), map_trials_sequential(1000, f));
    }
}
