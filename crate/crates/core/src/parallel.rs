//! Deterministic parallel reductions.
//!
//! Floating-point sums that influence optimizer decisions or persisted
//! output are accumulated per fixed-size slab in parallel and combined
//! sequentially in slab order, so results do not depend on the thread count
//! or scheduling.

use rayon::prelude::*;

const SLAB: usize = 16 * 1024;

/// Sum `f(i)` for `i in 0..n` with a fixed reduction order.
pub fn deterministic_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(SLAB))
        .into_par_iter()
        .map(|s| {
            let end = ((s + 1) * SLAB).min(n);
            let mut acc = 0.0;
            for i in s * SLAB..end {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Sum of pairs (value, count) with a fixed reduction order.
pub fn deterministic_sum_count<F>(n: usize, f: F) -> (f64, usize)
where
    F: Fn(usize) -> (f64, usize) + Sync,
{
    let partials: Vec<(f64, usize)> = (0..n.div_ceil(SLAB))
        .into_par_iter()
        .map(|s| {
            let end = ((s + 1) * SLAB).min(n);
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for i in s * SLAB..end {
                let (a, c) = f(i);
                acc += a;
                cnt += c;
            }
            (acc, cnt)
        })
        .collect();
    partials
        .iter()
        .fold((0.0, 0), |(a, c), &(pa, pc)| (a + pa, c + pc))
}
