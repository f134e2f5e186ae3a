//! Data-parallel execution helpers.
//!
//! Every helper here returns results in input order, and [`tree_reduce`]
//! combines partial results in a fixed pairwise order, so outputs are
//! bit-identical whether the `parallel` feature is enabled or not and
//! regardless of the worker count.

/// Environment variable holding the worker count for the global pool.
pub const WORKERS_ENV: &str = "NAVSCALE_WORKERS";

/// Maps `f` over `items` sequentially.
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `items` on the rayon pool, preserving order.
#[cfg(feature = "parallel")]
pub fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

/// Maps `f` over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |&i| f(i))
}

/// Combines `items` pairwise in a fixed balanced tree: `((a b) (c d)) ...`.
///
/// The shape depends only on `items.len()`.
pub fn tree_reduce<T, F>(mut items: Vec<T>, combine: F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Number of workers requested through [`WORKERS_ENV`], if set and valid.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Sizes the global rayon pool. A no-op without the `parallel` feature or
/// when the pool was already initialized.
pub fn configure_workers(n: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = n {
            builder = builder.num_threads(n);
        }
        let _ = builder.build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn seed_mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<u32> = (0..100).collect();
        assert_eq!(map(&v, |x| x * 2), map_sequential(&v, |x| x * 2));
    }

    #[test]
    fn tree_shape_is_fixed() {
        let v = vec!["a", "b", "c", "d", "e"];
        let s = tree_reduce(v.into_iter().map(String::from).collect(), |a, b| {
            format!("({a}{b})")
        });
        assert_eq!(s.as_deref(), Some("(((ab)(cd))e)"));
        assert_eq!(tree_reduce(Vec::<i32>::new(), |a, b| a + b), None);
    }
}
