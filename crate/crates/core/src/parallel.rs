//! Deterministic data-parallel helpers.
//!
//! Work is split into blocks whose boundaries depend only on the input size,
//! never on the thread count. Partial results are collected in block order
//! and reduced sequentially, so floating-point sums are bit-identical for
//! any worker count.

use std::ops::Range;

use rayon::prelude::*;

/// Frames per accumulation block.
pub const FRAME_BLOCK: usize = 1024;

/// Maps `f` over fixed-size index blocks of `0..n` and folds the partial
/// results in block order. Returns `None` when `n == 0`.
pub fn block_reduce<A, M, R>(n: usize, block: usize, map: M, mut reduce: R) -> Option<A>
where
    A: Send,
    M: Fn(Range<usize>) -> A + Sync + Send,
    R: FnMut(&mut A, A),
{
    let block = block.max(1);
    let n_blocks = n.div_ceil(block);
    let parts: Vec<A> = (0..n_blocks)
        .into_par_iter()
        .map(|b| map(b * block..((b + 1) * block).min(n)))
        .collect();
    let mut iter = parts.into_iter();
    let mut acc = iter.next()?;
    for p in iter {
        reduce(&mut acc, p);
    }
    Some(acc)
}

/// Order-preserving parallel map.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Order-preserving parallel map over fallible work; the first error in
/// input order wins.
pub fn try_ordered_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    let out: Vec<Result<R, E>> = items.par_iter().map(f).collect();
    out.into_iter().collect()
}

pub(crate) fn add_assign(acc: &mut [f64], part: &[f64]) {
    for (a, b) in acc.iter_mut().zip(part) {
        *a += b;
    }
}
