//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch onto the current rayon
//! pool; without it they fall back to plain sequential iterators. Output order
//! is always input order, so reductions over the results are deterministic
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
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

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Send + Sync,
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

/// Runs `f` on each fixed-size chunk of `data` together with the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
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

/// Fallible variant of [`map_slice`]; the first error in slice order wins.
pub fn try_map_slice<I, T, E, F>(items: &[I], f: F) -> Result<Vec<T>, E>
where
    I: Sync,
    T: Send,
    E: Send,
    F: Fn(&I) -> Result<T, E> + Send + Sync,
{
    map_slice(items, f).into_iter().collect()
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
    fn order_is_preserved() {
        let out = map_range(1000, |i| i * 2);
        assert!(out.iter().enumerate().all(|(i, v)| *v == i * 2));
        let sq = map_slice(&[3, 1, 2], |x| x * x);
        assert_eq!(sq, vec![9, 1, 4]);
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 37];
        for_each_chunk_mut(&mut v, 5, |ci, c| {
            for x in c.iter_mut() {
                *x = ci + 1;
            }
        });
        assert!(v.iter().all(|&x| x > 0));
        assert_eq!(v[36], 8);
    }

    #[test]
    fn first_error_in_order() {
        let r: Result<Vec<i32>, usize> =
            try_map_slice(&[1i32, -1, -2], |x| if *x < 0 { Err(x.unsigned_abs() as usize) } else { Ok(*x) });
        assert_eq!(r, Err(1));
    }
}
