//! Parallel/sequential execution helpers.
//!
//! Every data-parallel loop in the crate goes through these functions. Each
//! output element is computed independently and written to its own slot, so
//! the result does not depend on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fills `out[i] = f(i)` for every index.
#[cfg(feature = "parallel")]
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    out.par_iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
}

#[cfg(not(feature = "parallel"))]
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Treats `buf` as rows of length `stride` and fills row i with
/// `f(i, row)`.
#[cfg(feature = "parallel")]
pub fn fill_rows<F>(buf: &mut [f64], stride: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    buf.par_chunks_mut(stride).enumerate().for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn fill_rows<F>(buf: &mut [f64], stride: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    for (i, row) in buf.chunks_mut(stride).enumerate() {
        f(i, row);
    }
}
