//! Data-parallel helpers.
//!
//! With the `parallel` feature the batched kernels and Monte Carlo sweeps fan
//! out over rayon's pool; without it (or after [`set_enabled`]`(false)`) the
//! same closures run sequentially in index order. Work is split into
//! independent chunks whose results never depend on scheduling, so both paths
//! produce bit-identical output.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many scalar operations a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Toggles the parallel path at runtime. Has no effect without the
/// `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(i, chunk_i)` for every `chunk`-sized piece of `out`.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, work_per_chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let chunks = out.len() / chunk;
        if is_enabled() && chunks > 1 && chunks * work_per_chunk >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_per_chunk;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] over two output buffers split in lockstep.
pub fn for_each_chunk_pair_mut<F>(
    a: &mut [f64],
    chunk_a: usize,
    b: &mut [f64],
    chunk_b: usize,
    work_per_chunk: usize,
    f: F,
) where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    if chunk_a == 0 || chunk_b == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let chunks = a.len() / chunk_a;
        if is_enabled() && chunks > 1 && chunks * work_per_chunk >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            a.par_chunks_mut(chunk_a).zip(b.par_chunks_mut(chunk_b)).enumerate().for_each(|(i, (x, y))| f(i, x, y));
            return;
        }
    }
    let _ = work_per_chunk;
    a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate().for_each(|(i, (x, y))| f(i, x, y));
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_visit_every_index_once() {
        let mut buf = vec![0.0; 4 * 5000];
        for_each_chunk_mut(&mut buf, 4, 100, |i, c| c.iter_mut().for_each(|v| *v += i as f64));
        for (i, c) in buf.chunks(4).enumerate() {
            assert!(c.iter().all(|&v| v == i as f64));
        }
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indices(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }
}
