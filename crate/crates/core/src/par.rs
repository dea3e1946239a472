//! Data-parallel dispatch.
//!
//! With the `parallel` feature (on by default) these helpers fan work out over
//! the current rayon pool; without it they run the same closures in a plain
//! loop. Either way every output slot is written by exactly one closure call
//! and results come back in index order, so any reduction performed by the
//! caller sees the same operand order regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum rows handed to one rayon task. Below this the split overhead
/// dominates the arithmetic for the widths used here.
#[cfg(feature = "parallel")]
const MIN_ROWS_PER_TASK: usize = 16;

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(row_len)
            .with_min_len(MIN_ROWS_PER_TASK)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Evaluates `f` on `0..n` and collects the results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
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

/// Like [`map_indices`] but with one task per item; meant for coarse work
/// such as whole training runs.
pub fn map_coarse<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().with_max_len(1).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Number of worker threads the helpers above will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_visited_once_in_place() {
        let mut out = vec![0.0; 12];
        for_each_row(&mut out, 3, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        });
        assert_eq!(out[0..3], [0.0, 1.0, 2.0]);
        assert_eq!(out[9..12], [30.0, 31.0, 32.0]);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indices(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
        let w = map_coarse(vec![3, 1, 2], |x| x + 1);
        assert_eq!(w, vec![4, 2, 3]);
    }
}
