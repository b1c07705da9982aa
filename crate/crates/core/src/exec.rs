//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan work out over rayon's
//! current thread pool. Without it they run the same closures sequentially.
//! Every helper writes results by index, so the output is bit-identical
//! whichever path runs.

use ndarray::{Array2, ArrayViewMut1};

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Row-major storage of `m`, relaid out first if needed.
#[cfg(feature = "parallel")]
fn standard_rows(m: &mut Array2<f64>) -> &mut [f64] {
    if !m.is_standard_layout() {
        *m = m.as_standard_layout().into_owned();
    }
    m.as_slice_mut().expect("standard layout")
}

/// Applies `f(row_index, row)` to every row of `m`.
pub fn for_each_row_mut<F>(m: &mut Array2<f64>, f: F)
where
    F: Fn(usize, ArrayViewMut1<'_, f64>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let cols = m.ncols().max(1);
        standard_rows(m)
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, ArrayViewMut1::from(row)));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in m.axis_iter_mut(ndarray::Axis(0)).enumerate() {
            f(i, row);
        }
    }
}

/// Like [`for_each_row_mut`] but stops at the first error (lowest row index wins).
pub fn try_for_each_row_mut<F, E>(m: &mut Array2<f64>, f: F) -> Result<(), E>
where
    F: Fn(usize, ArrayViewMut1<'_, f64>) -> Result<(), E> + Sync + Send,
    E: Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let cols = m.ncols().max(1);
        let results: Vec<Result<(), E>> = standard_rows(m)
            .par_chunks_mut(cols)
            .enumerate()
            .map(|(i, row)| f(i, ArrayViewMut1::from(row)))
            .collect();
        results.into_iter().collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in m.axis_iter_mut(ndarray::Axis(0)).enumerate() {
            f(i, row)?;
        }
        Ok(())
    }
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
