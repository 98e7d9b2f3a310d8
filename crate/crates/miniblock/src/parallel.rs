//! Ordered data-parallel maps.
//!
//! Mini-block refreshes, per-block inversions and per-sample extractions are
//! independent tasks whose results must be assembled in a fixed order so that
//! runs are reproducible regardless of worker count. `ordered_map` dispatches
//! to rayon when the `parallel` feature is enabled (the default) and falls
//! back to a plain sequential loop otherwise. `ordered_map_seq` is always
//! sequential; the bench suite uses it as the comparison baseline.

/// Map `f` over `items`, returning results in input order.
#[cfg(feature = "parallel")]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, returning results in input order.
#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over `0..len`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn ordered_map_range<U, F>(len: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

/// Map `f` over `0..len`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub fn ordered_map_range<U, F>(len: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..len).map(f).collect()
}

/// Mutate every element in place, each owned by exactly one worker.
#[cfg(feature = "parallel")]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

/// Mutate every element in place, each owned by exactly one worker.
#[cfg(not(feature = "parallel"))]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    F: Fn(usize, &mut T),
{
    for (i, t) in items.iter_mut().enumerate() {
        f(i, t);
    }
}

/// Sequential reference version of [`ordered_map`].
pub fn ordered_map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sequential reference version of [`ordered_map_range`].
pub fn ordered_map_range_seq<U, F>(len: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..len).map(f).collect()
}
