//! Data-parallel helpers with a sequential fallback.
//!
//! Every batch-level routine in the crate takes an [`Execution`] and routes
//! its per-item work through these helpers. Results always come back in
//! input order and callers reduce them sequentially, so the numeric output
//! does not depend on the execution mode or the thread count.
//!
//! Without the `parallel` feature, [`Execution::Parallel`] runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many candidates a scan is not worth splitting.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_LEN: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Index in `0..n` with the smallest `(f64, tie)` key, where the float is
    /// ordered by `total_cmp` and remaining ties go to the lowest index.
    /// Indices whose key is `None` are skipped. Returns `(value, tie, index)`.
    pub fn argmin_range<F>(self, n: usize, f: F) -> Option<(f64, usize, usize)>
    where
        F: Fn(usize) -> Option<(f64, usize)> + Sync + Send,
    {
        type Key = Option<(f64, usize, usize)>;
        fn better(a: Key, b: Key) -> Key {
            match (a, b) {
                (None, x) | (x, None) => x,
                (Some(x), Some(y)) => {
                    let ord = y.0.total_cmp(&x.0).then(y.1.cmp(&x.1)).then(y.2.cmp(&x.2));
                    Some(if ord.is_lt() { y } else { x })
                }
            }
        }
        let key = |i: usize| f(i).map(|(d, t)| (d, t, i));
        #[cfg(feature = "parallel")]
        if self.is_parallel() && n >= PARALLEL_MIN_LEN {
            return (0..n).into_par_iter().map(key).reduce(|| None, better);
        }
        (0..n).map(key).fold(None, better)
    }

    /// Applies `f` to consecutive `chunk`-sized pieces of `out`, passing the chunk index.
    pub fn for_each_chunk_mut<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
