//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`map_collect`] fans work out over
//! rayon; without it the same call compiles to a plain loop. Results are
//! always collected in input order and reduced sequentially by callers, so
//! outputs are bit-identical regardless of feature or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_collect<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.par_iter().map(&f).collect()
}

/// Map `f` over `items`, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(|t| f(t)).collect()
}

/// Map over indices `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indices<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

/// Map over indices `0..n`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_indices<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept callable in every build so benchmarks can
/// compare both paths within a single compilation.
pub fn map_collect_seq<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Always-sequential index map; see [`map_collect_seq`].
pub fn map_indices_seq<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let items: Vec<u64> = (0..1000).collect();
        let a = map_collect(&items, |x| x * x);
        let b = map_collect_seq(&items, |x| x * x);
        assert_eq!(a, b);
        let c = map_indices(100, |i| i as u64 * 3);
        let d = map_indices_seq(100, |i| i as u64 * 3);
        assert_eq!(c, d);
    }
}
