//! Small dense routines for the symmetric positive definite systems that
//! show up in penalized least squares. Problem sizes stay below a few
//! hundred, so unblocked textbook algorithms are plenty.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Result of factoring a symmetric positive definite matrix, remembering
/// whatever ridge had to be added to make the factorization succeed.
pub(crate) struct SpdFactor {
    lower: Array2<f64>,
    pub ridge: f64,
}

/// Lower-triangular Cholesky factor, or `None` when a pivot is not strictly
/// positive (the matrix is numerically rank deficient).
pub(crate) fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !d.is_finite() || d <= 0.0 {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

/// Factor `m`, retrying once with the ridge `eps = 1e-10 * trace(m) / q`
/// added to the diagonal when the plain factorization fails.
pub(crate) fn factor_spd(m: &Array2<f64>) -> Option<SpdFactor> {
    if let Some(lower) = cholesky(m.view()) {
        return Some(SpdFactor { lower, ridge: 0.0 });
    }
    let q = m.nrows();
    let trace: f64 = m.diag().sum();
    if !trace.is_finite() || trace <= 0.0 {
        return None;
    }
    let ridge = 1e-10 * trace / q as f64;
    let mut ridged = m.clone();
    for i in 0..q {
        ridged[[i, i]] += ridge;
    }
    cholesky(ridged.view()).map(|lower| SpdFactor { lower, ridge })
}

impl SpdFactor {
    /// Solve `m x = b` using the stored factor.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let l = &self.lower;
        let n = l.nrows();
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    /// Solve `m X = B` column by column.
    pub fn solve_many(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve(col));
        }
        out
    }
}

/// Orthonormal basis of the null space of `c'`, from the Householder
/// reflection `H` that sends `c` to a multiple of `e1`: for j >= 2 the
/// column `H e_j` satisfies `(H e_j)' c = e_j' (H c) = 0`, and the columns
/// of an orthogonal matrix are orthonormal. Requires `c != 0`.
pub(crate) fn householder_null_basis(c: ArrayView1<f64>) -> Array2<f64> {
    let n = c.len();
    assert!(n >= 2, "null basis needs at least two coordinates");
    let norm = c.dot(&c).sqrt();
    assert!(norm > 0.0, "null basis of the zero vector is the full space");
    let mut v = c.to_owned();
    // sign(c[0]) chosen to avoid cancellation; sign(0) = +1 keeps v nonzero.
    let s = if c[0] < 0.0 { -1.0 } else { 1.0 };
    v[0] += s * norm;
    let beta = 2.0 / v.dot(&v);
    let mut z = Array2::<f64>::zeros((n, n - 1));
    for j in 1..n {
        for i in 0..n {
            let e = if i == j { 1.0 } else { 0.0 };
            z[[i, j - 1]] = e - beta * v[i] * v[j];
        }
    }
    z
}
