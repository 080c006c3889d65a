//! B-spline bases, difference penalties, and tensor-product designs.
//!
//! Everything here is deterministic given its inputs: knot placement uses
//! equally spaced quantiles of the supplied values, evaluation clamps
//! out-of-range points to the boundary, and constraint absorption uses a
//! Householder reflection, so repeated construction from the same data is
//! bitwise identical.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::linalg::householder_null_basis;

#[derive(Debug, Clone, Error)]
pub enum BasisError {
    #[error("need at least one value to place knots")]
    EmptyValues,
    #[error("values are degenerate: min equals max ({0})")]
    DegenerateRange(f64),
    #[error("values contain a non-finite entry")]
    NonFiniteValue,
    #[error("num_basis {num_basis} must be at least degree + 1 = {}", degree + 1)]
    InvalidBasisSize { num_basis: usize, degree: usize },
    #[error("penalty order {order} must be at least 1 and below the basis size {size}")]
    InvalidPenaltyOrder { order: usize, size: usize },
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl BasisError {
    /// True when the error reflects the caller's inputs (data or settings)
    /// rather than an internal inconsistency.
    pub fn is_user(&self) -> bool {
        !matches!(self, BasisError::DimensionMismatch(_))
    }
}

/// Quantile of pre-sorted values with linear interpolation between order
/// statistics (index h = p (n - 1), the convention used by most numerical
/// environments).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    let frac = h - lo as f64;
    sorted[lo.min(n - 1)] + frac * (sorted[hi] - sorted[lo.min(n - 1)])
}

/// A univariate B-spline basis on a clamped knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    knots: Vec<f64>,
    degree: usize,
    num_basis: usize,
}

impl SplineBasis {
    /// Build a basis for observed values: boundary knots at the data range
    /// (each repeated degree + 1 times) and `num_basis - degree - 1`
    /// interior knots at equally spaced quantiles.
    pub fn from_values(
        values: ArrayView1<f64>,
        num_basis: usize,
        degree: usize,
    ) -> Result<Self, BasisError> {
        if values.is_empty() {
            return Err(BasisError::EmptyValues);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::NonFiniteValue);
        }
        if num_basis < degree + 1 {
            return Err(BasisError::InvalidBasisSize { num_basis, degree });
        }
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if lo == hi {
            return Err(BasisError::DegenerateRange(lo));
        }
        let num_interior = num_basis - degree - 1;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        for j in 1..=num_interior {
            knots.push(quantile_sorted(&sorted, j as f64 / (num_interior + 1) as f64));
        }
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(SplineBasis { knots, degree, num_basis })
    }

    /// Rebuild a basis from a stored knot vector (model deserialization).
    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self, BasisError> {
        if knots.len() < 2 * (degree + 1) {
            return Err(BasisError::InvalidKnots(format!(
                "{} knots cannot support degree {}",
                knots.len(),
                degree
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(BasisError::InvalidKnots("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(BasisError::InvalidKnots("knots must be non-decreasing".into()));
        }
        let num_basis = knots.len() - degree - 1;
        let basis = SplineBasis { knots, degree, num_basis };
        let (lo, hi) = basis.domain();
        if lo >= hi {
            return Err(BasisError::InvalidKnots("empty basis domain".into()));
        }
        Ok(basis)
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// The interval on which the basis partitions unity.
    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.knots.len() - 1 - self.degree])
    }

    fn clamp(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        x.clamp(lo, hi)
    }

    /// Knot span index k with knots[k] <= x < knots[k+1], pinned to the last
    /// non-empty span at the right boundary.
    fn find_span(&self, x: f64) -> usize {
        let first = self.degree;
        let last = self.knots.len() - self.degree - 2;
        if x >= self.knots[last + 1] {
            let mut k = last;
            while k > first && self.knots[k] >= self.knots[k + 1] {
                k -= 1;
            }
            return k;
        }
        let mut lo = first;
        let mut hi = last;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.knots[mid] <= x {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Cox-de Boor triangle for the deg + 1 basis functions that are nonzero
    /// on the span. Every denominator brackets the current non-empty span,
    /// so no division by zero can occur.
    fn local_basis(&self, span: usize, x: f64, deg: usize, vals: &mut [f64]) {
        let mut left = vec![0.0; deg + 1];
        let mut right = vec![0.0; deg + 1];
        vals[0] = 1.0;
        for j in 1..=deg {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
    }

    /// Dense n x num_basis evaluation matrix; out-of-range points are
    /// clamped to the boundary first.
    pub fn basis_matrix(&self, xs: ArrayView1<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((xs.len(), self.num_basis));
        let mut vals = vec![0.0; self.degree + 1];
        for (i, &x0) in xs.iter().enumerate() {
            let x = self.clamp(x0);
            let span = self.find_span(x);
            self.local_basis(span, x, self.degree, &mut vals);
            for (j, &v) in vals.iter().enumerate() {
                out[[i, span - self.degree + j]] = v;
            }
        }
        out
    }

    /// First-derivative matrix via the B-spline derivative recursion,
    /// with 0/0 treated as 0 at repeated boundary knots. Out-of-range points
    /// are clamped, so boundary rows carry the one-sided derivative of the
    /// boundary polynomial piece.
    pub fn deriv_matrix(&self, xs: ArrayView1<f64>) -> Array2<f64> {
        let deg = self.degree;
        let mut out = Array2::zeros((xs.len(), self.num_basis));
        if deg == 0 {
            return out;
        }
        let mut low = vec![0.0; deg];
        for (i, &x0) in xs.iter().enumerate() {
            let x = self.clamp(x0);
            let span = self.find_span(x);
            self.local_basis(span, x, deg - 1, &mut low);
            // low[j] is B_{span-deg+1+j, deg-1}(x); anything outside that
            // window is zero at x.
            let lower = |j: isize| -> f64 {
                let first = span as isize - deg as isize + 1;
                if j >= first && j <= span as isize {
                    low[(j - first) as usize]
                } else {
                    0.0
                }
            };
            for idx in 0..=deg {
                let r = span - deg + idx;
                let d1 = self.knots[r + deg] - self.knots[r];
                let d2 = self.knots[r + deg + 1] - self.knots[r + 1];
                let t1 = if d1 > 0.0 { lower(r as isize) / d1 } else { 0.0 };
                let t2 = if d2 > 0.0 { lower(r as isize + 1) / d2 } else { 0.0 };
                out[[i, r]] = deg as f64 * (t1 - t2);
            }
        }
        out
    }
}

/// A difference matrix and the order it applies; the roughness penalty on
/// coefficients theta is lambda ||P theta||^2 = lambda theta' P'P theta.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub matrix: Array2<f64>,
    pub order: usize,
}

impl PenaltyMatrix {
    /// Order-th difference matrix of shape (size - order) x size, built by
    /// repeatedly differencing the identity.
    pub fn difference(order: usize, size: usize) -> Result<Self, BasisError> {
        if order == 0 || order >= size {
            return Err(BasisError::InvalidPenaltyOrder { order, size });
        }
        let mut d = Array2::<f64>::eye(size);
        for _ in 0..order {
            d = &d.slice(s![1.., ..]) - &d.slice(s![..-1, ..]);
        }
        Ok(PenaltyMatrix { matrix: d, order })
    }

    /// Penalty with no rows: contributes nothing to any quadratic form.
    pub fn empty(size: usize) -> Self {
        PenaltyMatrix { matrix: Array2::zeros((0, size)), order: 0 }
    }

    /// The Gram matrix P'P entering the normal equations.
    pub fn gram(&self) -> Array2<f64> {
        self.matrix.t().dot(&self.matrix)
    }

    /// Penalty expressed in transformed coordinates theta = Z theta_new.
    pub fn in_coordinates(&self, z: ArrayView2<f64>) -> Self {
        PenaltyMatrix { matrix: self.matrix.dot(&z), order: self.order }
    }
}

/// Row-wise Kronecker product: row i of the result is kron(b_i, c_i), the
/// second factor's index moving fastest.
pub fn row_kronecker(b: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>, BasisError> {
    if b.nrows() != c.nrows() {
        return Err(BasisError::DimensionMismatch(format!(
            "row-wise Kronecker factors have {} and {} rows",
            b.nrows(),
            c.nrows()
        )));
    }
    let (n, nb) = (b.nrows(), b.ncols());
    let nc = c.ncols();
    let mut out = Array2::zeros((n, nb * nc));
    for i in 0..n {
        for r in 0..nb {
            let brv = b[[i, r]];
            for s in 0..nc {
                out[[i, r * nc + s]] = brv * c[[i, s]];
            }
        }
    }
    Ok(out)
}

/// `p ⊗ I_m`: expands a first-axis marginal penalty to tensor coefficients
/// ordered with the second axis fastest.
pub fn kron_identity_right(p: ArrayView2<f64>, m: usize) -> Array2<f64> {
    let (rows, cols) = (p.nrows(), p.ncols());
    let mut out = Array2::zeros((rows * m, cols * m));
    for i in 0..rows {
        for j in 0..cols {
            let v = p[[i, j]];
            if v != 0.0 {
                for k in 0..m {
                    out[[i * m + k, j * m + k]] = v;
                }
            }
        }
    }
    out
}

/// `I_n ⊗ p`: expands a second-axis marginal penalty to tensor coefficients.
pub fn kron_identity_left(n: usize, p: ArrayView2<f64>) -> Array2<f64> {
    let (rows, cols) = (p.nrows(), p.ncols());
    let mut out = Array2::zeros((n * rows, n * cols));
    for b in 0..n {
        for i in 0..rows {
            for j in 0..cols {
                out[[b * rows + i, b * cols + j]] = p[[i, j]];
            }
        }
    }
    out
}

/// Marginal penalties expanded to the tensor coefficient space: the first
/// factor penalizes along the u axis, the second along the dose axis.
pub fn tensor_penalties(
    pen_u: &PenaltyMatrix,
    pen_a: &PenaltyMatrix,
    num_u: usize,
    num_a: usize,
) -> Result<(PenaltyMatrix, PenaltyMatrix), BasisError> {
    if pen_u.matrix.ncols() != num_u || pen_a.matrix.ncols() != num_a {
        return Err(BasisError::DimensionMismatch(format!(
            "marginal penalties cover {} and {} coefficients, expected {} and {}",
            pen_u.matrix.ncols(),
            pen_a.matrix.ncols(),
            num_u,
            num_a
        )));
    }
    let tensor_u = PenaltyMatrix {
        matrix: kron_identity_right(pen_u.matrix.view(), num_a),
        order: pen_u.order,
    };
    let tensor_a = PenaltyMatrix {
        matrix: kron_identity_left(num_u, pen_a.matrix.view()),
        order: pen_a.order,
    };
    Ok((tensor_u, tensor_a))
}

/// A marginal basis with the sum-to-zero constraint `1'B gamma = 0` absorbed
/// by reparameterization: columns of the returned design span exactly the
/// constrained functions, and the penalty is expressed in the reduced
/// coordinates.
#[derive(Debug, Clone)]
pub struct ConstrainedMarginal {
    pub design: Array2<f64>,
    pub penalty: PenaltyMatrix,
    /// Coordinate map: original coefficients are `z . reduced`.
    pub z: Array2<f64>,
    /// Set when the constraint was already identically zero and no
    /// dimension could be removed.
    pub already_zero: bool,
}

/// Absorb `1'B gamma = 0` into the basis via the null space of the column
/// sums. When the column sums already vanish the transform is the identity
/// and the flag is raised instead of dropping a dimension.
pub fn absorb_sum_to_zero(
    b: ArrayView2<f64>,
    penalty: &PenaltyMatrix,
) -> Result<ConstrainedMarginal, BasisError> {
    let m = b.ncols();
    if penalty.matrix.ncols() != m {
        return Err(BasisError::DimensionMismatch(format!(
            "penalty covers {} coefficients but the basis has {}",
            penalty.matrix.ncols(),
            m
        )));
    }
    let col_sums: Array1<f64> = b.sum_axis(ndarray::Axis(0));
    if col_sums.iter().all(|v| *v == 0.0) {
        return Ok(ConstrainedMarginal {
            design: b.to_owned(),
            penalty: penalty.clone(),
            z: Array2::eye(m),
            already_zero: true,
        });
    }
    if m < 2 {
        return Err(BasisError::DimensionMismatch(
            "cannot absorb a constraint into a single-column basis".into(),
        ));
    }
    let z = householder_null_basis(col_sums.view());
    Ok(ConstrainedMarginal {
        design: b.dot(&z),
        penalty: penalty.in_coordinates(z.view()),
        z,
        already_zero: false,
    })
}

/// Options shared by every tensor-product construction in the crate.
#[derive(Debug, Clone, Copy)]
pub struct TensorOptions {
    pub num_basis_u: usize,
    pub num_basis_a: usize,
    pub degree: usize,
    pub penalty_order: usize,
}

/// The constrained interaction design for one pass of the alternating fit.
///
/// Two constraints are absorbed into the coordinates. The dose-axis marginal
/// is sum-to-zero over the observed doses, which removes every function of
/// `u` alone from the span: for any coefficient vector and any fixed `u`,
/// the fitted surface sums to zero over the training doses. On top of that
/// the whole term is centered over the sample (the usual identifiability
/// constraint for tensor interaction terms), so the fitted values
/// `g(u_i, A_i)` also sum to zero exactly. The interaction block therefore
/// has `num_basis_u * (num_basis_a - 1) - 1` columns.
#[derive(Debug, Clone)]
pub struct ConstrainedTensorDesign {
    pub basis_u: SplineBasis,
    pub basis_a: SplineBasis,
    /// Dose-axis constraint map, num_basis_a x (num_basis_a - 1).
    pub z_a: Array2<f64>,
    /// Term-centering map applied after the marginal constraint.
    pub z_term: Array2<f64>,
    /// n x (num_basis_u * (num_basis_a - 1) - 1) design matrix.
    pub design: Array2<f64>,
    pub penalty_u: PenaltyMatrix,
    pub penalty_a: PenaltyMatrix,
    pub already_zero: bool,
}

impl ConstrainedTensorDesign {
    pub fn build(
        u: ArrayView1<f64>,
        a: ArrayView1<f64>,
        opts: &TensorOptions,
    ) -> Result<Self, BasisError> {
        if u.len() != a.len() {
            return Err(BasisError::DimensionMismatch(format!(
                "{} index values against {} doses",
                u.len(),
                a.len()
            )));
        }
        let basis_u = SplineBasis::from_values(u, opts.num_basis_u, opts.degree)?;
        let basis_a = SplineBasis::from_values(a, opts.num_basis_a, opts.degree)?;
        let b_u = basis_u.basis_matrix(u);
        let b_a = basis_a.basis_matrix(a);
        let pen_u = PenaltyMatrix::difference(opts.penalty_order, opts.num_basis_u)?;
        let pen_a = PenaltyMatrix::difference(opts.penalty_order, opts.num_basis_a)?;
        let marginal = absorb_sum_to_zero(b_a.view(), &pen_a)?;
        let reduced_a = marginal.design.ncols();
        let d0 = row_kronecker(b_u.view(), marginal.design.view())?;
        let (tensor_u, tensor_a) = tensor_penalties(&pen_u, &marginal.penalty, opts.num_basis_u, reduced_a)?;
        let col_sums: Array1<f64> = d0.sum_axis(ndarray::Axis(0));
        let (z_term, design, penalty_u, penalty_a) = if col_sums.iter().all(|v| *v == 0.0) {
            let q = d0.ncols();
            (Array2::eye(q), d0, tensor_u, tensor_a)
        } else {
            let z2 = householder_null_basis(col_sums.view());
            let design = d0.dot(&z2);
            let penalty_u = tensor_u.in_coordinates(z2.view());
            let penalty_a = tensor_a.in_coordinates(z2.view());
            (z2, design, penalty_u, penalty_a)
        };
        Ok(ConstrainedTensorDesign {
            basis_u,
            basis_a,
            z_a: marginal.z,
            z_term,
            design,
            penalty_u,
            penalty_a,
            already_zero: marginal.already_zero,
        })
    }

    /// Map reduced coefficients back to the marginal tensor grid
    /// (num_basis_u rows, constrained dose coordinates as columns).
    pub fn marginal_coefficients(&self, theta: ArrayView1<f64>) -> Array2<f64> {
        let full = self.z_term.dot(&theta);
        let rows = self.basis_u.num_basis();
        let cols = full.len() / rows;
        Array2::from_shape_vec((rows, cols), full.to_vec()).expect("coefficient layout")
    }

    /// Surface values g(u_i, a_i) for arbitrary point pairs.
    pub fn eval(
        &self,
        u: ArrayView1<f64>,
        a: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Array1<f64> {
        self.eval_with(u, a, theta, false)
    }

    /// Partial derivative of the surface in u at arbitrary point pairs.
    pub fn eval_deriv_u(
        &self,
        u: ArrayView1<f64>,
        a: ArrayView1<f64>,
        theta: ArrayView1<f64>,
    ) -> Array1<f64> {
        self.eval_with(u, a, theta, true)
    }

    fn eval_with(
        &self,
        u: ArrayView1<f64>,
        a: ArrayView1<f64>,
        theta: ArrayView1<f64>,
        deriv: bool,
    ) -> Array1<f64> {
        let coefs = self.marginal_coefficients(theta);
        let b_u = if deriv { self.basis_u.deriv_matrix(u) } else { self.basis_u.basis_matrix(u) };
        let b_a = self.basis_a.basis_matrix(a).dot(&self.z_a);
        let expanded = b_u.dot(&coefs);
        (&expanded * &b_a).sum_axis(ndarray::Axis(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn uniform_values(seed: u64, n: usize, lo: f64, hi: f64) -> Array1<f64> {
        let mut r = rng::substream(seed, [90, 0, 0]);
        Array1::from_iter((0..n).map(|_| rng::uniform(&mut r, lo, hi)))
    }

    #[test]
    fn knots_for_two_points_have_no_interior() {
        let basis = SplineBasis::from_values(array![0.0, 1.0].view(), 4, 3).unwrap();
        assert_eq!(basis.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(basis.num_basis(), 4);
    }

    #[test]
    fn single_interior_knot_lands_on_the_median() {
        let grid = Array1::linspace(0.0, 1.0, 101);
        let basis = SplineBasis::from_values(grid.view(), 5, 3).unwrap();
        assert_eq!(basis.knots().len(), 9);
        assert_abs_diff_eq!(basis.knots()[4], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn interior_knots_match_a_sort_and_index_quantile_oracle() {
        let values = uniform_values(41, 1000, -1.0, 1.0);
        let basis = SplineBasis::from_values(values.view(), 8, 3).unwrap();

        // Independent oracle: sort, then interpolate order statistics at
        // h = p (n - 1) for p = 0.2, 0.4, 0.6, 0.8.
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (k, p) in [(0usize, 0.2), (1, 0.4), (2, 0.6), (3, 0.8)] {
            let h: f64 = p * 999.0;
            let lo = h.floor() as usize;
            let expect = sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo]);
            assert_abs_diff_eq!(basis.knots()[4 + k], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn num_basis_below_degree_plus_one_is_rejected() {
        let err = SplineBasis::from_values(array![0.0, 1.0].view(), 3, 3).unwrap_err();
        assert!(matches!(err, BasisError::InvalidBasisSize { .. }));
        let err = SplineBasis::from_values(array![2.0, 2.0].view(), 5, 3).unwrap_err();
        assert!(matches!(err, BasisError::DegenerateRange(_)));
    }

    #[test]
    fn degree_one_basis_hits_hand_values() {
        let basis = SplineBasis::from_knots(vec![0.0, 0.0, 1.0, 2.0, 2.0], 1).unwrap();
        let rows = basis.basis_matrix(array![0.5].view());
        assert_abs_diff_eq!(rows[[0, 0]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[[0, 1]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[[0, 2]], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cubic_basis_at_a_uniform_interior_knot_is_one_sixth_two_thirds_one_sixth() {
        // Hand-run Cox-de Boor: on a uniform knot spacing, a cubic B-spline
        // takes 1/6, 2/3, 1/6 at the three knots interior to its support.
        let knots = vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 7.0, 7.0, 7.0];
        let basis = SplineBasis::from_knots(knots, 3).unwrap();
        let rows = basis.basis_matrix(array![3.0].view());
        assert_abs_diff_eq!(rows[[0, 3]], 1.0 / 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rows[[0, 4]], 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rows[[0, 5]], 1.0 / 6.0, epsilon = 1e-14);
        let total: f64 = rows.row(0).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn out_of_range_points_are_clamped() {
        let values = uniform_values(42, 200, 0.0, 2.0);
        let basis = SplineBasis::from_values(values.view(), 8, 3).unwrap();
        let (lo, hi) = basis.domain();
        let clamped = basis.basis_matrix(array![lo - 5.0, hi + 5.0].view());
        let edges = basis.basis_matrix(array![lo, hi].view());
        assert_eq!(clamped, edges);
    }

    #[test]
    fn local_support_windows_hold() {
        let values = uniform_values(43, 300, -2.0, 3.0);
        let basis = SplineBasis::from_values(values.view(), 9, 3).unwrap();
        let xs = uniform_values(44, 200, -2.0, 3.0);
        let rows = basis.basis_matrix(xs.view());
        for (i, &x) in xs.iter().enumerate() {
            for r in 0..basis.num_basis() {
                let support = (basis.knots()[r], basis.knots()[r + basis.degree() + 1]);
                if x < support.0 || x > support.1 {
                    assert_eq!(rows[[i, r]], 0.0, "B_{r} should vanish at {x}");
                }
            }
        }
    }

    #[test]
    fn degree_one_derivative_hits_hand_values() {
        let basis = SplineBasis::from_knots(vec![0.0, 0.0, 1.0, 2.0, 2.0], 1).unwrap();
        let rows = basis.deriv_matrix(array![0.5].view());
        assert_abs_diff_eq!(rows[[0, 0]], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[[0, 1]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rows[[0, 2]], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn derivative_rows_sum_to_zero() {
        let values = uniform_values(45, 500, 0.0, 2.0);
        let basis = SplineBasis::from_values(values.view(), 8, 3).unwrap();
        let xs = uniform_values(46, 100, 0.0, 2.0);
        let rows = basis.deriv_matrix(xs.view());
        for i in 0..rows.nrows() {
            assert_abs_diff_eq!(rows.row(i).sum(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let values = uniform_values(47, 400, -1.0, 1.0);
        let basis = SplineBasis::from_values(values.view(), 8, 3).unwrap();
        let (lo, hi) = basis.domain();
        let h = 1e-6;
        let mut r = rng::substream(48, [0, 0, 0]);
        for _ in 0..50 {
            let x = rng::uniform(&mut r, lo + 10.0 * h, hi - 10.0 * h);
            let analytic = basis.deriv_matrix(array![x].view());
            let up = basis.basis_matrix(array![x + h].view());
            let down = basis.basis_matrix(array![x - h].view());
            let scale = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for r in 0..basis.num_basis() {
                let fd = (up[[0, r]] - down[[0, r]]) / (2.0 * h);
                assert!(
                    (analytic[[0, r]] - fd).abs() <= 1e-5 * scale,
                    "derivative mismatch at x={x}, r={r}: {} vs {}",
                    analytic[[0, r]],
                    fd
                );
            }
        }
    }

    #[test]
    fn difference_matrices_match_hand_values() {
        let d2 = PenaltyMatrix::difference(2, 5).unwrap();
        assert_eq!(d2.matrix.nrows(), 3);
        assert_eq!(d2.matrix.row(0).to_vec(), vec![1.0, -2.0, 1.0, 0.0, 0.0]);
        assert_eq!(d2.matrix.row(1).to_vec(), vec![0.0, 1.0, -2.0, 1.0, 0.0]);
        assert_eq!(d2.matrix.row(2).to_vec(), vec![0.0, 0.0, 1.0, -2.0, 1.0]);

        let d1 = PenaltyMatrix::difference(1, 3).unwrap();
        assert_eq!(d1.matrix.row(0).to_vec(), vec![-1.0, 1.0, 0.0]);
        assert_eq!(d1.matrix.row(1).to_vec(), vec![0.0, -1.0, 1.0]);
    }

    #[test]
    fn difference_rows_carry_alternating_binomial_coefficients() {
        for order in 1..=4usize {
            let d = PenaltyMatrix::difference(order, 9).unwrap();
            for row in d.matrix.rows() {
                assert_abs_diff_eq!(row.sum(), 0.0, epsilon = 1e-12);
                let nonzero: Vec<f64> = row.iter().copied().filter(|v| *v != 0.0).collect();
                assert_eq!(nonzero.len(), order + 1);
                let mut binom = 1.0f64;
                for (k, &v) in nonzero.iter().enumerate() {
                    let sign = if (order - k) % 2 == 0 { 1.0 } else { -1.0 };
                    assert_abs_diff_eq!(v, sign * binom, epsilon = 1e-12);
                    binom = binom * (order - k) as f64 / (k + 1) as f64;
                }
            }
        }
    }

    #[test]
    fn invalid_penalty_order_is_rejected() {
        assert!(matches!(
            PenaltyMatrix::difference(0, 5),
            Err(BasisError::InvalidPenaltyOrder { .. })
        ));
        assert!(matches!(
            PenaltyMatrix::difference(5, 5),
            Err(BasisError::InvalidPenaltyOrder { .. })
        ));
    }

    #[test]
    fn row_kronecker_matches_a_brute_force_oracle() {
        let mut r = rng::substream(49, [0, 0, 0]);
        let b = Array2::from_shape_fn((5, 3), |_| rng::uniform(&mut r, -1.0, 1.0));
        let c = Array2::from_shape_fn((5, 2), |_| rng::uniform(&mut r, -1.0, 1.0));
        let d = row_kronecker(b.view(), c.view()).unwrap();
        assert_eq!(d.shape(), [5, 6]);
        for i in 0..5 {
            for r0 in 0..3 {
                for s in 0..2 {
                    assert_abs_diff_eq!(
                        d[[i, r0 * 2 + s]],
                        b[[i, r0]] * c[[i, s]],
                        epsilon = 1e-15
                    );
                }
            }
        }
        let bad = row_kronecker(b.view(), c.slice(s![..4, ..]));
        assert!(matches!(bad, Err(BasisError::DimensionMismatch(_))));
    }

    #[test]
    fn absorbing_the_constraint_on_identity_gives_the_expected_direction() {
        let b = Array2::<f64>::eye(2);
        let pen = PenaltyMatrix::difference(1, 2).unwrap();
        let cm = absorb_sum_to_zero(b.view(), &pen).unwrap();
        assert!(!cm.already_zero);
        assert_eq!(cm.z.shape(), [2, 1]);
        // The null space of (1, 1)' is spanned by (1, -1)/sqrt(2) up to sign.
        assert_abs_diff_eq!(cm.z[[0, 0]].abs(), 1.0 / 2.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(cm.z[[0, 0]] + cm.z[[1, 0]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constrained_marginal_columns_sum_to_zero() {
        let values = uniform_values(50, 400, 0.0, 2.0);
        let basis = SplineBasis::from_values(values.view(), 8, 3).unwrap();
        let b = basis.basis_matrix(values.view());
        let pen = PenaltyMatrix::difference(2, 8).unwrap();
        let cm = absorb_sum_to_zero(b.view(), &pen).unwrap();
        assert_eq!(cm.design.ncols(), 7);
        assert_eq!(cm.penalty.matrix.shape(), [6, 7]);
        for col in cm.design.columns() {
            assert_abs_diff_eq!(col.sum(), 0.0, epsilon = 1e-10 * values.len() as f64);
        }
        // Quadratic forms agree between original and reduced coordinates.
        let mut r = rng::substream(51, [0, 0, 0]);
        let reduced = Array1::from_shape_fn(7, |_| rng::uniform(&mut r, -1.0, 1.0));
        let original = cm.z.dot(&reduced);
        let q_red = cm.penalty.matrix.dot(&reduced).mapv(|v| v * v).sum();
        let q_orig = pen.matrix.dot(&original).mapv(|v| v * v).sum();
        assert_abs_diff_eq!(q_red, q_orig, epsilon = 1e-12);
    }

    #[test]
    fn already_zero_constraint_returns_identity_with_flag() {
        let b = array![[1.0, -1.0], [-1.0, 1.0]];
        let pen = PenaltyMatrix::difference(1, 2).unwrap();
        let cm = absorb_sum_to_zero(b.view(), &pen).unwrap();
        assert!(cm.already_zero);
        assert_eq!(cm.z, Array2::<f64>::eye(2));
        assert_eq!(cm.design, b);
    }

    #[test]
    fn tensor_penalty_shapes_match_kronecker_arithmetic() {
        let pen_u = PenaltyMatrix { matrix: Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64), order: 2 };
        let pen_a = PenaltyMatrix::difference(1, 3).unwrap();
        let (tu, ta) = tensor_penalties(&pen_u, &pen_a, 4, 3).unwrap();
        assert_eq!(tu.matrix.shape(), [6, 12]);
        assert_eq!(ta.matrix.shape(), [8, 12]);
    }

    #[test]
    fn tensor_penalties_match_a_reshape_oracle() {
        // ||(P ⊗ I) theta||^2 must equal the sum over dose-axis slices of
        // ||P theta_col||^2 when theta is laid out with the dose index
        // fastest, and symmetrically for the other axis.
        let pen_u = PenaltyMatrix::difference(2, 5).unwrap();
        let pen_a = PenaltyMatrix::difference(2, 4).unwrap();
        let (tu, ta) = tensor_penalties(&pen_u, &pen_a, 5, 4).unwrap();
        let mut r = rng::substream(52, [0, 0, 0]);
        for _ in 0..20 {
            let theta = Array1::from_shape_fn(20, |_| rng::uniform(&mut r, -2.0, 2.0));
            let grid = Array2::from_shape_vec((5, 4), theta.to_vec()).unwrap();
            let direct_u = tu.matrix.dot(&theta).mapv(|v| v * v).sum();
            let direct_a = ta.matrix.dot(&theta).mapv(|v| v * v).sum();
            let mut oracle_u = 0.0;
            for col in grid.columns() {
                oracle_u += pen_u.matrix.dot(&col).mapv(|v| v * v).sum();
            }
            let mut oracle_a = 0.0;
            for row in grid.rows() {
                oracle_a += pen_a.matrix.dot(&row).mapv(|v| v * v).sum();
            }
            assert_abs_diff_eq!(direct_u, oracle_u, epsilon = 1e-10);
            assert_abs_diff_eq!(direct_a, oracle_a, epsilon = 1e-10);
        }
    }

    #[test]
    fn tensor_penalty_annihilates_constant_in_u_surfaces() {
        let pen_u = PenaltyMatrix::difference(2, 5).unwrap();
        let pen_a = PenaltyMatrix::difference(2, 4).unwrap();
        let (tu, _) = tensor_penalties(&pen_u, &pen_a, 5, 4).unwrap();
        // theta_{rs} = v_s for all r: constant along u, so no u-roughness.
        let v = array![0.3, -1.2, 0.8, 2.0];
        let theta = Array1::from_shape_fn(20, |i| v[i % 4]);
        assert_abs_diff_eq!(tu.matrix.dot(&theta).mapv(|x| x * x).sum(), 0.0, epsilon = 1e-24);
    }

    fn toy_design(seed: u64, n: usize) -> (ConstrainedTensorDesign, Array1<f64>, Array1<f64>) {
        let u = uniform_values(seed, n, -1.3, 1.3);
        let a = uniform_values(seed + 1, n, 0.0, 2.0);
        let opts = TensorOptions { num_basis_u: 8, num_basis_a: 8, degree: 3, penalty_order: 2 };
        let design = ConstrainedTensorDesign::build(u.view(), a.view(), &opts).unwrap();
        (design, u, a)
    }

    #[test]
    fn constrained_design_dimensions() {
        let (design, _, _) = toy_design(53, 100);
        // 8 u-basis columns times 7 constrained dose columns, minus one for
        // the term-centering constraint.
        assert_eq!(design.design.ncols(), 55);
        assert_eq!(design.penalty_u.matrix.ncols(), 55);
        assert_eq!(design.penalty_a.matrix.ncols(), 55);
        assert_eq!(design.z_a.shape(), [8, 7]);
    }

    #[test]
    fn surface_sums_to_zero_over_training_doses_for_every_fixed_u() {
        let (design, _, a) = toy_design(54, 150);
        let mut r = rng::substream(55, [0, 0, 0]);
        let q = design.design.ncols();
        for _ in 0..20 {
            let theta = Array1::from_shape_fn(q, |_| rng::uniform(&mut r, -3.0, 3.0));
            let norm = theta.dot(&theta).sqrt();
            for _ in 0..10 {
                let u0 = rng::uniform(&mut r, -1.3, 1.3);
                let us = Array1::from_elem(a.len(), u0);
                let g = design.eval(us.view(), a.view(), theta.view());
                assert_abs_diff_eq!(g.sum(), 0.0, epsilon = 1e-8 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn fitted_term_sums_to_zero_over_the_sample_for_every_theta() {
        let (design, u, a) = toy_design(56, 150);
        let mut r = rng::substream(57, [0, 0, 0]);
        let q = design.design.ncols();
        for _ in 0..20 {
            let theta = Array1::from_shape_fn(q, |_| rng::uniform(&mut r, -3.0, 3.0));
            let norm = theta.dot(&theta).sqrt();
            let g = design.eval(u.view(), a.view(), theta.view());
            assert_abs_diff_eq!(g.sum(), 0.0, epsilon = 1e-8 * norm.max(1.0));
            // The design matrix rows must agree with basis evaluation.
            let direct = design.design.dot(&theta);
            for i in 0..u.len() {
                assert_abs_diff_eq!(g[i], direct[i], epsilon = 1e-10 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn constrained_design_penalties_match_original_coordinates() {
        let (design, _, _) = toy_design(58, 120);
        let pen_u = PenaltyMatrix::difference(2, 8).unwrap();
        let mut r = rng::substream(59, [0, 0, 0]);
        let q = design.design.ncols();
        for _ in 0..10 {
            let theta = Array1::from_shape_fn(q, |_| rng::uniform(&mut r, -2.0, 2.0));
            let grid = design.marginal_coefficients(theta.view());
            let mut oracle = 0.0;
            for col in grid.columns() {
                oracle += pen_u.matrix.dot(&col).mapv(|v| v * v).sum();
            }
            let direct = design.penalty_u.matrix.dot(&theta).mapv(|v| v * v).sum();
            assert_abs_diff_eq!(direct, oracle, epsilon = 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn basis_rows_always_partition_unity(
            seed in 0u64..1000,
            num_basis in 4usize..12,
            degree in 1usize..4,
            n in 20usize..100,
        ) {
            prop_assume!(num_basis >= degree + 1);
            let values = uniform_values(seed, n, -2.0, 2.0);
            let basis = SplineBasis::from_values(values.view(), num_basis, degree).unwrap();
            let xs = uniform_values(seed + 1000, 50, -3.0, 3.0); // includes out-of-range
            let rows = basis.basis_matrix(xs.view());
            for i in 0..rows.nrows() {
                prop_assert!((rows.row(i).sum() - 1.0).abs() < 1e-12);
                for v in rows.row(i) {
                    prop_assert!(*v >= -1e-14);
                }
            }
        }
    }
}
