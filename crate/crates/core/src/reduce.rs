//! Fixed-order pairwise reductions.
//!
//! All conserved-quantity sums go through [`pairwise_sum`] so that results do
//! not depend on the number of worker threads: the summation tree is a
//! function of the slice length only.

/// Sum `values` with a fixed-order pairwise (binary tree) reduction.
///
/// Deterministic for a given input slice and more accurate than a running
/// sum for long arrays.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` over `0..n` without materializing the values.
pub fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: &F) -> f64 {
    fn go<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        const LEAF: usize = 64;
        if hi - lo <= LEAF {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    go(0, n, f)
}
