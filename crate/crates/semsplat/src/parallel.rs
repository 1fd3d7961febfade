//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the index-space maps below run on
//! rayon; without it they run as plain loops. Reductions come in two flavors:
//!
//! * [`Reduction::Ordered`] splits the index space into fixed-size chunks,
//!   reduces each chunk in index order, and folds the per-chunk partials in
//!   chunk order. The result is bit-identical regardless of thread count and
//!   identical to the sequential build.
//! * [`Reduction::Fast`] lets rayon reduce in whatever order work-stealing
//!   produces. Floating-point sums may differ between runs. Without the
//!   `parallel` feature it behaves like `Ordered`.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by ordered reductions. Fixed so that chunk boundaries
/// (and therefore rounding) never depend on the thread count.
pub const ORDERED_CHUNK: usize = 2048;

/// Reduction order policy for floating-point accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Deterministic: fixed chunking, in-order combination.
    #[default]
    Ordered,
    /// Unordered rayon reduction; fastest, not run-to-run reproducible.
    Fast,
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps `f` over the items of a slice, collecting results in order.
pub fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f` for each mutable chunk of `data`, `chunk` elements at a time.
/// Chunk index is passed alongside the slice.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Reduces `f(i)` over `0..n` into an accumulator via `merge`.
///
/// `zero` builds an identity accumulator, `f` computes the per-index value,
/// and `merge` folds one value into the accumulator. Under
/// [`Reduction::Ordered`] the combination order is fixed; under
/// [`Reduction::Fast`] it is whatever rayon produces.
pub fn reduce_indexed<T, Z, F, M>(n: usize, mode: Reduction, zero: Z, f: F, merge: M) -> T
where
    T: Send,
    Z: Fn() -> T + Sync + Send,
    F: Fn(usize) -> T + Sync + Send,
    M: Fn(&mut T, T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        match mode {
            Reduction::Ordered => {
                let chunks: Vec<T> = (0..n)
                    .collect::<Vec<_>>()
                    .par_chunks(ORDERED_CHUNK)
                    .map(|idxs| {
                        let mut acc = zero();
                        for &i in idxs {
                            merge(&mut acc, f(i));
                        }
                        acc
                    })
                    .collect();
                let mut acc = zero();
                for c in chunks {
                    merge(&mut acc, c);
                }
                acc
            }
            Reduction::Fast => (0..n)
                .into_par_iter()
                .fold(&zero, |mut acc, i| {
                    merge(&mut acc, f(i));
                    acc
                })
                .reduce(&zero, |mut a, b| {
                    merge(&mut a, b);
                    a
                }),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = mode;
        let mut acc = zero();
        let mut start = 0;
        while start < n {
            let end = (start + ORDERED_CHUNK).min(n);
            let mut part = zero();
            for i in start..end {
                merge(&mut part, f(i));
            }
            merge(&mut acc, part);
            start = end;
        }
        acc
    }
}

/// Ordered floating-point sum of `f(i)` over `0..n`.
pub fn sum_indexed<F>(n: usize, mode: Reduction, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    reduce_indexed(n, mode, || 0.0, f, |a, b| *a += b)
}

/// Accumulates per-index dense gradient contributions into a flat buffer.
///
/// Each call to `f(i, buf)` may add into any slot of `buf`. Chunks are merged
/// in index order, so the result is deterministic.
pub fn accumulate_dense<F>(n: usize, len: usize, mode: Reduction, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    reduce_indexed(
        n,
        mode,
        || vec![0.0; len],
        |i| {
            let mut buf = vec![0.0; len];
            f(i, &mut buf);
            buf
        },
        |acc, part| {
            for (a, p) in acc.iter_mut().zip(part.iter()) {
                *a += *p;
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_sum_matches_manual_chunking() {
        let n = 5000;
        let vals: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 1000) as f64 * 1e-3).collect();
        let got = sum_indexed(n, Reduction::Ordered, |i| vals[i]);

        let mut expect = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + ORDERED_CHUNK).min(n);
            let mut part = 0.0;
            for v in &vals[start..end] {
                part += v;
            }
            expect += part;
            start = end;
        }
        assert_eq!(got.to_bits(), expect.to_bits());
    }

    #[test]
    fn ordered_sum_is_reproducible() {
        let n = 10_000;
        let f = |i: usize| (i as f64).sin() * 1e-3;
        let a = sum_indexed(n, Reduction::Ordered, f);
        let b = sum_indexed(n, Reduction::Ordered, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn fast_sum_close_to_ordered() {
        let n = 10_000;
        let f = |i: usize| (i as f64).cos();
        let a = sum_indexed(n, Reduction::Ordered, f);
        let b = sum_indexed(n, Reduction::Fast, f);
        assert!((a - b).abs() < 1e-9 * n as f64);
    }

    #[test]
    fn map_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }
}
