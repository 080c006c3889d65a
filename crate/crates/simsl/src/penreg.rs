//! Penalized least squares and penalized IRLS, with GCV selection of the
//! two smoothing parameters on a fixed grid.
//!
//! The estimation criterion is
//! `||sqrt(W)(y - D theta)||^2 + lambda ||P theta||^2 + lambda_check ||P_check theta||^2`,
//! solved through the normal equations with a dense Cholesky factorization.
//! A rank-deficient system gets one ridge retry with
//! `eps = 1e-10 trace(M)/q`; anything worse is a hard numerical error.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::basis::PenaltyMatrix;
use crate::family::Family;
use crate::linalg::factor_spd;

const MAX_IRLS_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;
/// Floor for IRLS weights so the working response stays finite at saturated
/// points (where the variance function underflows to zero).
const MIN_IRLS_WEIGHT: f64 = 1e-10;

#[derive(Debug, Clone, Error)]
pub enum FitError {
    #[error("normal equations are singular even after the ridge fallback")]
    Singular,
    #[error("IRLS diverged: no finite penalized deviance after {0} step halvings")]
    IrlsDiverged(usize),
    #[error("saturated fit: effective degrees of freedom {edf:.3} reach the sample size {n}")]
    Saturated { edf: f64, n: usize },
    #[error("every (lambda, lambda_check) pair failed: {0}")]
    AllLambdasFailed(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// One penalized fit at fixed smoothing parameters.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub theta: Array1<f64>,
    pub lambda_u: f64,
    pub lambda_a: f64,
    pub edf: f64,
    pub gcv: f64,
    /// Linear predictor `D theta + offset`.
    pub eta: Array1<f64>,
    /// Final IRLS weights; all ones for gaussian fits.
    pub weights: Array1<f64>,
    /// Working residuals `z - D theta` at the final weights, which equal
    /// `(y - mu) / w` for canonical links.
    pub working_residuals: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Ridge added by the fallback, 0 when plain Cholesky succeeded.
    pub ridge: f64,
}

/// Precomputed pieces shared by every solve on one design: the unweighted
/// Gram matrix (reused across the whole gaussian grid search) and the two
/// penalty Gram matrices.
struct System<'a> {
    d: ArrayView2<'a, f64>,
    gram0: Array2<f64>,
    gram_u: Array2<f64>,
    gram_a: Array2<f64>,
}

struct Solved {
    theta: Array1<f64>,
    edf: f64,
    ridge: f64,
}

impl<'a> System<'a> {
    fn new(
        d: ArrayView2<'a, f64>,
        pen_u: &PenaltyMatrix,
        pen_a: &PenaltyMatrix,
    ) -> Result<Self, FitError> {
        let q = d.ncols();
        if pen_u.matrix.ncols() != q || pen_a.matrix.ncols() != q {
            return Err(FitError::DimensionMismatch(format!(
                "penalties cover {} and {} coefficients, design has {}",
                pen_u.matrix.ncols(),
                pen_a.matrix.ncols(),
                q
            )));
        }
        Ok(System {
            d,
            gram0: d.t().dot(&d),
            gram_u: pen_u.gram(),
            gram_a: pen_a.gram(),
        })
    }

    /// Solve the penalized normal equations for a working response and
    /// weights, returning the coefficients and the effective degrees of
    /// freedom tr((D'WD + S)^{-1} D'WD).
    fn solve(
        &self,
        z: ArrayView1<f64>,
        weights: Option<ArrayView1<f64>>,
        lambda_u: f64,
        lambda_a: f64,
    ) -> Result<Solved, FitError> {
        let weighted_gram;
        let (gram, rhs) = match weights {
            None => (&self.gram0, self.d.t().dot(&z)),
            Some(w) => {
                let sw = w.mapv(f64::sqrt);
                let dw = &self.d * &sw.view().insert_axis(Axis(1));
                let zw = &z * &sw;
                weighted_gram = dw.t().dot(&dw);
                (&weighted_gram, dw.t().dot(&zw))
            }
        };
        let mut m = gram.clone();
        m.scaled_add(lambda_u, &self.gram_u);
        m.scaled_add(lambda_a, &self.gram_a);
        if m.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite("normal equations"));
        }
        let factor = factor_spd(&m).ok_or(FitError::Singular)?;
        let theta = factor.solve(rhs.view());
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite("coefficients"));
        }
        let edf = factor.solve_many(gram.view()).diag().sum();
        if !edf.is_finite() {
            return Err(FitError::NonFinite("effective degrees of freedom"));
        }
        Ok(Solved { theta, edf, ridge: factor.ridge })
    }
}

fn weighted_rss(
    z: ArrayView1<f64>,
    fitted: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
) -> f64 {
    match weights {
        None => z
            .iter()
            .zip(fitted.iter())
            .map(|(zi, fi)| (zi - fi) * (zi - fi))
            .sum(),
        Some(w) => z
            .iter()
            .zip(fitted.iter())
            .zip(w.iter())
            .map(|((zi, fi), wi)| wi * (zi - fi) * (zi - fi))
            .sum(),
    }
}

/// Generalized cross-validation score `n RSS_w / (n - edf)^2` against the
/// (working) response.
pub fn gcv_score(
    d: ArrayView2<f64>,
    z: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
    theta: ArrayView1<f64>,
    edf: f64,
) -> Result<f64, FitError> {
    let n = z.len();
    if edf >= n as f64 {
        return Err(FitError::Saturated { edf, n });
    }
    let fitted = d.dot(&theta);
    let rss = weighted_rss(z, fitted.view(), weights);
    let denom = n as f64 - edf;
    let gcv = n as f64 * rss / (denom * denom);
    if !gcv.is_finite() {
        return Err(FitError::NonFinite("GCV score"));
    }
    Ok(gcv)
}

fn gaussian_core(
    system: &System,
    y: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
    lambda_u: f64,
    lambda_a: f64,
) -> Result<PenalizedFit, FitError> {
    let n = y.len();
    let solved = system.solve(y, weights, lambda_u, lambda_a)?;
    if solved.edf >= n as f64 {
        return Err(FitError::Saturated { edf: solved.edf, n });
    }
    let eta = system.d.dot(&solved.theta);
    let rss = weighted_rss(y, eta.view(), weights);
    let denom = n as f64 - solved.edf;
    let gcv = n as f64 * rss / (denom * denom);
    if !gcv.is_finite() {
        return Err(FitError::NonFinite("GCV score"));
    }
    let w = match weights {
        Some(w) => w.to_owned(),
        None => Array1::ones(n),
    };
    let working_residuals = &y - &eta;
    Ok(PenalizedFit {
        theta: solved.theta,
        lambda_u,
        lambda_a,
        edf: solved.edf,
        gcv,
        eta,
        weights: w,
        working_residuals,
        converged: true,
        iterations: 1,
        ridge: solved.ridge,
    })
}

/// Penalized (weighted) least squares at fixed smoothing parameters.
pub fn penalized_ls_solve(
    d: ArrayView2<f64>,
    y: ArrayView1<f64>,
    pen_u: &PenaltyMatrix,
    pen_a: &PenaltyMatrix,
    lambda_u: f64,
    lambda_a: f64,
    weights: Option<ArrayView1<f64>>,
) -> Result<PenalizedFit, FitError> {
    if d.nrows() != y.len() {
        return Err(FitError::DimensionMismatch(format!(
            "{} rows against {} responses",
            d.nrows(),
            y.len()
        )));
    }
    let system = System::new(d, pen_u, pen_a)?;
    gaussian_core(&system, y, weights, lambda_u, lambda_a)
}

/// Penalized IRLS for a canonical-link family. The gaussian case is exactly
/// one penalized least-squares solve; the discrete families iterate working
/// responses `z = eta - offset + (y - mu)/w` with weights `w = b''(eta)`,
/// guarding each update by step halving toward the previous coefficients
/// whenever the penalized deviance would not decrease.
#[allow(clippy::too_many_arguments)]
pub fn pirls_fit(
    d: ArrayView2<f64>,
    y: ArrayView1<f64>,
    pen_u: &PenaltyMatrix,
    pen_a: &PenaltyMatrix,
    lambda_u: f64,
    lambda_a: f64,
    family: Family,
    offset: Option<ArrayView1<f64>>,
) -> Result<PenalizedFit, FitError> {
    if d.nrows() != y.len() {
        return Err(FitError::DimensionMismatch(format!(
            "{} rows against {} responses",
            d.nrows(),
            y.len()
        )));
    }
    let system = System::new(d, pen_u, pen_a)?;
    match family {
        Family::Gaussian => gaussian_shifted(&system, y, offset, lambda_u, lambda_a),
        _ => pirls_core(&system, y, lambda_u, lambda_a, family, offset, None),
    }
}

/// Gaussian fit with an offset: solve against `y - offset`, then report the
/// linear predictor back on the original scale.
fn gaussian_shifted(
    system: &System,
    y: ArrayView1<f64>,
    offset: Option<ArrayView1<f64>>,
    lambda_u: f64,
    lambda_a: f64,
) -> Result<PenalizedFit, FitError> {
    match offset {
        None => gaussian_core(system, y, None, lambda_u, lambda_a),
        Some(o) => {
            let shifted = &y - &o;
            let mut fit = gaussian_core(system, shifted.view(), None, lambda_u, lambda_a)?;
            fit.eta = &fit.eta + &o;
            Ok(fit)
        }
    }
}

fn pirls_core(
    system: &System,
    y: ArrayView1<f64>,
    lambda_u: f64,
    lambda_a: f64,
    family: Family,
    offset: Option<ArrayView1<f64>>,
    warm_start: Option<ArrayView1<f64>>,
) -> Result<PenalizedFit, FitError> {
    let n = y.len();
    let d = system.d;
    let offset_v = match offset {
        Some(o) => o.to_owned(),
        None => Array1::zeros(n),
    };
    let penalized_deviance = |theta: &Array1<f64>, eta: &Array1<f64>| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            ll += y[i] * eta[i] - family.cumulant(eta[i]);
        }
        let qu = system.gram_u.dot(theta).dot(theta);
        let qa = system.gram_a.dot(theta).dot(theta);
        -2.0 * ll + lambda_u * qu + lambda_a * qa
    };

    let mut theta = match warm_start {
        Some(t) if t.len() == d.ncols() => t.to_owned(),
        _ => Array1::zeros(d.ncols()),
    };
    let mut eta = d.dot(&theta) + &offset_v;
    let mut objective = penalized_deviance(&theta, &eta);
    if !objective.is_finite() {
        theta.fill(0.0);
        eta.assign(&offset_v);
        objective = penalized_deviance(&theta, &eta);
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut ridge = 0.0f64;

    for iter in 1..=MAX_IRLS_ITER {
        iterations = iter;
        let w = eta.mapv(|e| family.irls_weight(e).max(MIN_IRLS_WEIGHT));
        let mut z = Array1::zeros(n);
        for i in 0..n {
            let mu = family.inverse_link(eta[i]);
            z[i] = eta[i] - offset_v[i] + (y[i] - mu) / w[i];
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite("working response"));
        }
        let solved = system.solve(z.view(), Some(w.view()), lambda_u, lambda_a)?;
        ridge = ridge.max(solved.ridge);

        // Step halving toward the previous coefficients until the penalized
        // deviance stops increasing.
        let mut candidate = solved.theta;
        let mut accepted = None;
        for halving in 0..=MAX_HALVINGS {
            let eta_try = d.dot(&candidate) + &offset_v;
            let obj_try = penalized_deviance(&candidate, &eta_try);
            if obj_try.is_finite() && obj_try <= objective + 1e-12 * (1.0 + objective.abs()) {
                accepted = Some((candidate, eta_try, obj_try));
                break;
            }
            if halving == MAX_HALVINGS {
                if !obj_try.is_finite() {
                    return Err(FitError::IrlsDiverged(MAX_HALVINGS));
                }
                break;
            }
            candidate = (&candidate + &theta) / 2.0;
        }
        let Some((theta_new, eta_new, obj_new)) = accepted else {
            // The full sequence of halvings could not improve on the current
            // point; stop here rather than loop on rejected steps.
            break;
        };
        let delta = theta_new
            .iter()
            .zip(theta.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = 1.0 + theta_new.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        theta = theta_new;
        eta = eta_new;
        objective = obj_new;
        if delta / scale < IRLS_TOL {
            converged = true;
            break;
        }
    }

    // Final weights, working residuals, and selection quantities, all at the
    // accepted coefficients.
    let w = eta.mapv(|e| family.irls_weight(e).max(MIN_IRLS_WEIGHT));
    let mut working_residuals = Array1::zeros(n);
    let mut z = Array1::zeros(n);
    for i in 0..n {
        let mu = family.inverse_link(eta[i]);
        working_residuals[i] = (y[i] - mu) / w[i];
        z[i] = eta[i] - offset_v[i] + working_residuals[i];
    }
    let solved = system.solve(z.view(), Some(w.view()), lambda_u, lambda_a)?;
    let edf = solved.edf;
    if edf >= n as f64 {
        return Err(FitError::Saturated { edf, n });
    }
    let fitted = &eta - &offset_v;
    let rss = weighted_rss(z.view(), fitted.view(), Some(w.view()));
    let denom = n as f64 - edf;
    let gcv = n as f64 * rss / (denom * denom);
    if !gcv.is_finite() {
        return Err(FitError::NonFinite("GCV score"));
    }
    Ok(PenalizedFit {
        theta,
        lambda_u,
        lambda_a,
        edf,
        gcv,
        eta,
        weights: w,
        working_residuals,
        converged,
        iterations,
        ridge: ridge.max(solved.ridge),
    })
}

/// Result of the two-axis grid search.
#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda_u: f64,
    pub lambda_a: f64,
    pub fit: PenalizedFit,
    /// Grid pairs that failed to fit (the rest of the grid still competes).
    pub failures: usize,
}

/// Exhaustive GCV search over the Cartesian grid of smoothing parameters,
/// ties broken toward the larger lambda and then the larger lambda_check.
/// Discrete-family fits are warm-started from the previous grid point.
pub fn select_lambdas(
    d: ArrayView2<f64>,
    y: ArrayView1<f64>,
    pen_u: &PenaltyMatrix,
    pen_a: &PenaltyMatrix,
    family: Family,
    grid: &[f64],
    offset: Option<ArrayView1<f64>>,
) -> Result<LambdaSelection, FitError> {
    if grid.is_empty() || grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(FitError::DimensionMismatch(
            "smoothing grid must be non-empty, finite, and non-negative".into(),
        ));
    }
    if d.nrows() != y.len() {
        return Err(FitError::DimensionMismatch(format!(
            "{} rows against {} responses",
            d.nrows(),
            y.len()
        )));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let system = System::new(d, pen_u, pen_a)?;
    let mut best: Option<LambdaSelection> = None;
    let mut failures: Vec<String> = Vec::new();
    let mut warm: Option<Array1<f64>> = None;
    for &lu in &sorted {
        for &la in &sorted {
            let attempt = match family {
                Family::Gaussian => gaussian_shifted(&system, y, offset, lu, la),
                _ => pirls_core(
                    &system,
                    y,
                    lu,
                    la,
                    family,
                    offset,
                    warm.as_ref().map(|w| w.view()),
                ),
            };
            match attempt {
                Ok(fit) => {
                    if family != Family::Gaussian {
                        warm = Some(fit.theta.clone());
                    }
                    let better = match &best {
                        None => true,
                        // <= so that equal scores prefer the pair scanned
                        // later, i.e. the larger lambdas.
                        Some(b) => fit.gcv <= b.fit.gcv,
                    };
                    if better {
                        best = Some(LambdaSelection {
                            lambda_u: lu,
                            lambda_a: la,
                            fit,
                            failures: 0,
                        });
                    }
                }
                Err(e) => failures.push(format!("lambda={lu:.3e}, lambda_check={la:.3e}: {e}")),
            }
        }
    }
    match best {
        Some(mut sel) => {
            sel.failures = failures.len();
            Ok(sel)
        }
        None => Err(FitError::AllLambdasFailed(failures.join("; "))),
    }
}

/// Ordinary weighted least squares through the shared ridge-guarded solver.
pub fn weighted_ls(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
) -> Result<Array1<f64>, FitError> {
    if x.nrows() != y.len() {
        return Err(FitError::DimensionMismatch(format!(
            "{} rows against {} responses",
            x.nrows(),
            y.len()
        )));
    }
    let empty_u = PenaltyMatrix::empty(x.ncols());
    let empty_a = PenaltyMatrix::empty(x.ncols());
    let system = System::new(x, &empty_u, &empty_a)?;
    let solved = system.solve(y, weights, 0.0, 0.0)?;
    Ok(solved.theta)
}

/// The default smoothing grid: 11 log-spaced points from 1e-4 to 1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..11).map(|i| 10f64.powf(-4.0 + 0.8 * i as f64)).collect()
}
