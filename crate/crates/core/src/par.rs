//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions split the index range into fixed-size chunks, evaluate the
//! chunks (in parallel when the `parallel` feature is on), and fold the
//! partial results left to right. The chunking does not depend on the
//! thread count, so parallel and sequential builds give bit-identical
//! floating-point results.

use std::ops::Range;

/// Samples per chunk in [`map_reduce`].
pub const CHUNK: usize = 256;

fn chunks(n: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Evaluates `chunk_op` on consecutive chunks of `0..n` and folds the results
/// in chunk order.
pub fn map_reduce<R, F, C>(n: usize, chunk_op: F, init: R, combine: C) -> R
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
    C: Fn(R, R) -> R,
{
    let parts = map_collect(chunks(n), chunk_op);
    parts.into_iter().fold(init, combine)
}

/// Maps every item, preserving order.
#[cfg(feature = "parallel")]
pub fn map_collect<T, R, F>(items: Vec<T>, op: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(op).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, R, F>(items: Vec<T>, op: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(op).collect()
}

/// Runs `op(i)` for `i in 0..n`, preserving order.
pub fn map_range<R, F>(n: usize, op: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_collect((0..n).collect(), op)
}

/// Adds `b` into `a` element-wise and returns `a`.
pub(crate) fn add_vec(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    if a.is_empty() {
        return b;
    }
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}
