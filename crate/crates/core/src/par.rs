//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper here produces bitwise-identical results in both modes: work
//! is split into fixed index ranges whose partial results are combined in
//! ascending order, so thread scheduling never changes a floating-point fold.
//! Without the `parallel` feature, [`Execution::Parallel`] silently runs
//! sequentially.

/// How to run a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when the parallel path is both requested and compiled in.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Elements per work unit for chunked loops. Also the fold granularity of
/// [`chunked_sum`], so changing it changes the rounding of those sums.
pub const CHUNK: usize = 4096;

/// `(0..n).map(f).collect()` in index order.
pub fn map_indices<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_indices`] but over a slice of owned items, mutated in place.
pub fn for_each_mut<T, F>(exec: Execution, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        items.par_iter_mut().for_each(f);
        return;
    }
    let _ = exec;
    items.iter_mut().for_each(f);
}

/// Fill `out[i] = f(i)` in chunks of [`CHUNK`].
pub fn fill_indexed<F>(exec: Execution, out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && out.len() > CHUNK {
        use rayon::prelude::*;
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            let base = c * CHUNK;
            for (j, slot) in chunk.iter_mut().enumerate() {
                *slot = f(base + j);
            }
        });
        return;
    }
    let _ = exec;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Sum of per-sample vectors `f(j)` for `j in 0..n`, each of length `width`.
///
/// Samples are folded left-to-right inside each chunk of [`CHUNK`] samples,
/// then chunk partials are folded in ascending chunk order.
pub fn chunked_sum<F>(exec: Execution, n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partial = |c: usize| {
        let mut acc = vec![0.0; width];
        let mut scratch = vec![0.0; width];
        let end = ((c + 1) * CHUNK).min(n);
        for j in c * CHUNK..end {
            f(j, &mut scratch);
            for (a, s) in acc.iter_mut().zip(&scratch) {
                *a += *s;
            }
        }
        acc
    };
    let partials = map_indices(exec, chunks, partial);
    let mut total = vec![0.0; width];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += *v;
        }
    }
    total
}
