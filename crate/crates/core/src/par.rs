//! Order-preserving parallel maps. Results never depend on the worker count:
//! every reduction is done sequentially over fixed-size blocks.

/// Block size for deterministic partial sums.
pub const BLOCK: usize = 2048;

#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sum of `f(i)` over `0..n`, blocked so the floating-point order is fixed.
pub fn sum_range<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let blocks = n.div_ceil(BLOCK);
    let partial = map_range(blocks, |b| {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(n);
        (lo..hi).map(&f).sum::<f64>()
    });
    partial.into_iter().sum()
}

/// Vector-valued blocked sum; `f` accumulates row `i` into the buffer.
pub fn sum_vec_range<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let blocks = n.div_ceil(BLOCK);
    let partial = map_range(blocks, |b| {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(n);
        let mut acc = vec![0.0; width];
        for i in lo..hi {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for block in partial {
        for (t, v) in total.iter_mut().zip(block) {
            *t += v;
        }
    }
    total
}

/// Runs `f` inside a pool with the given worker count (ignored without the `parallel` feature).
#[cfg(feature = "parallel")]
pub fn with_threads<T: Send, F: FnOnce() -> T + Send>(threads: Option<usize>, f: F) -> T {
    match threads {
        Some(t) if t > 0 => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<T: Send, F: FnOnce() -> T + Send>(_threads: Option<usize>, f: F) -> T {
    f()
}
