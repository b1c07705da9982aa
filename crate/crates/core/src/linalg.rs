//! Small dense kernels: Cholesky factor/solve and weighted Gram products.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Lower-triangular Cholesky factor `L` with `A = L L^T`, stored row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix. Only the lower triangle is read.
    /// Returns `None` when a pivot is not strictly positive and finite.
    pub fn factor(a: ArrayView2<'_, f64>) -> Option<Self> {
        Self::factor_with_jitter(a, 0.0)
    }

    /// Factors `A + jitter * I`.
    pub fn factor_with_jitter(a: ArrayView2<'_, f64>, jitter: f64) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "Cholesky needs a square matrix");
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                let dot: f64 = ri.iter().zip(rj).map(|(x, y)| x * y).sum();
                let mut v = a[[i, j]] - dot;
                if i == j {
                    v += jitter;
                    if !(v.is_finite() && v > 0.0) {
                        return None;
                    }
                    l[i * n + i] = v.sqrt();
                } else {
                    l[i * n + j] = v / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        // forward: L y = b
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / self.l[i * n + i];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.l[k * n + i] * y[k]).sum();
            y[i] = (y[i] - s) / self.l[i * n + i];
        }
        Array1::from_vec(y)
    }
}

/// `H^T diag(w) H` for `H` of shape `n x d`; result is `d x d`.
pub fn weighted_gram(h: ArrayView2<'_, f64>, w: ArrayView1<'_, f64>) -> Array2<f64> {
    assert_eq!(h.nrows(), w.len());
    let mut scaled = h.to_owned();
    for (mut row, &wk) in scaled.axis_iter_mut(Axis(0)).zip(w.iter()) {
        row *= wk;
    }
    let d = h.ncols();
    let mut out = Array2::zeros((d, d));
    general_mat_mul(1.0, &h.t(), &scaled, 0.0, &mut out);
    out
}

/// `H H^T` for `H` of shape `n x d`; result is `n x n`.
pub fn outer_gram(h: ArrayView2<'_, f64>) -> Array2<f64> {
    h.dot(&h.t())
}

/// Appends a constant-one column: `[x | 1]`.
pub fn augment(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::ones((n, d + 1));
    out.slice_mut(ndarray::s![.., ..d]).assign(&x);
    out
}
