//! Individualized dose rules read off a fitted surface, and two ways to
//! score a rule: the closed-form scenario truth, and a smoother-based
//! estimate from held-out data.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{row_kronecker, tensor_penalties, BasisError, PenaltyMatrix, SplineBasis};
use crate::family::Family;
use crate::model::{Dataset, ModelError, SimslModel};
use crate::penreg::{default_lambda_grid, select_lambdas, FitError};
use crate::simbench::Scenario;

#[derive(Debug, Error)]
pub enum DoseError {
    #[error("unknown scenario {0}; known scenarios are 1 through 4")]
    UnknownScenario(u32),
    #[error("invalid input: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

impl DoseError {
    pub fn is_user(&self) -> bool {
        match self {
            DoseError::UnknownScenario(_) | DoseError::Data(_) => true,
            DoseError::Model(e) => e.is_user(),
            DoseError::Basis(e) => e.is_user(),
            DoseError::Fit(_) => false,
        }
    }
}

/// Grid size used when the caller does not supply one.
pub const DEFAULT_DOSE_GRID: usize = 100;

/// `size` equally spaced doses spanning the closed range.
pub fn dose_grid(a_range: (f64, f64), size: usize) -> Array1<f64> {
    Array1::linspace(a_range.0, a_range.1, size)
}

/// The estimated rule: for each covariate row, the grid dose maximizing the
/// fitted surface. Only the interaction surface varies with the dose, so
/// maximizing it also maximizes the full linear predictor and any
/// increasing transform of it. Exact ties keep the first grid point, the
/// smallest dose on an ascending grid. `None` uses 100 equally spaced
/// doses over the training range.
pub fn optimal_dose(
    model: &SimslModel,
    x: ArrayView2<f64>,
    grid: Option<ArrayView1<f64>>,
) -> Result<Array1<f64>, DoseError> {
    let default_grid;
    let grid = match grid {
        Some(g) => g,
        None => {
            default_grid = dose_grid(model.a_range, DEFAULT_DOSE_GRID);
            default_grid.view()
        }
    };
    if grid.is_empty() {
        return Err(DoseError::Data("the dose grid is empty".into()));
    }
    if grid.iter().any(|d| !d.is_finite()) {
        return Err(DoseError::Data("the dose grid contains a non-finite value".into()));
    }
    let u = model.index(x)?;
    let lattice = model.surface.g_lattice(u.view(), grid);
    let mut doses = Array1::zeros(x.nrows());
    for (i, row) in lattice.outer_iter().enumerate() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        doses[i] = grid[best];
    }
    Ok(doses)
}

/// Average scenario mean outcome when row i receives doses[i]: the exact
/// value of a rule under one of the built-in scenarios, available because
/// the truth is known there.
pub fn true_value_scenario(
    doses: ArrayView1<f64>,
    x: ArrayView2<f64>,
    scenario: u32,
) -> Result<f64, DoseError> {
    let spec = Scenario::from_id(scenario).map_err(|_| DoseError::UnknownScenario(scenario))?;
    if doses.len() != x.nrows() {
        return Err(DoseError::Data(format!(
            "{} doses against {} covariate rows",
            doses.len(),
            x.nrows()
        )));
    }
    if x.nrows() == 0 {
        return Err(DoseError::Data("no rows to evaluate".into()));
    }
    if x.ncols() < spec.required_p() {
        return Err(DoseError::Data(format!(
            "scenario {} needs at least {} covariates, got {}",
            scenario,
            spec.required_p(),
            x.ncols()
        )));
    }
    let mut total = 0.0;
    for i in 0..x.nrows() {
        total += spec.mean_response(x.row(i), doses[i]);
    }
    Ok(total / x.nrows() as f64)
}

/// Knobs of the value smoother.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueSmootherConfig {
    pub num_basis: usize,
    pub degree: usize,
    pub penalty_order: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for ValueSmootherConfig {
    fn default() -> Self {
        ValueSmootherConfig {
            num_basis: 8,
            degree: 3,
            penalty_order: 2,
            lambda_grid: default_lambda_grid(),
        }
    }
}

impl ValueSmootherConfig {
    fn validate(&self) -> Result<(), DoseError> {
        if self.degree == 0 || self.num_basis <= self.degree {
            return Err(DoseError::Data(
                "num_basis must exceed the degree, and the degree must be at least 1".into(),
            ));
        }
        if self.penalty_order == 0 || self.penalty_order >= self.num_basis {
            return Err(DoseError::Data("penalty order out of range".into()));
        }
        if self.lambda_grid.is_empty()
            || self.lambda_grid.iter().any(|l| !l.is_finite() || *l < 0.0)
        {
            return Err(DoseError::Data(
                "lambda grid must be non-empty, finite, and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A value estimate from held-out data.
#[derive(Debug, Clone)]
pub struct ValueEstimate {
    pub value: f64,
    /// Set when every recommended dose coincided and the smoother
    /// degenerated to a one-axis smooth in the observed dose.
    pub degenerate_doses: bool,
}

fn standardize(v: ArrayView1<f64>) -> (Array1<f64>, f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    if sd > 0.0 {
        (v.mapv(|x| (x - mean) / sd), mean, sd)
    } else {
        (v.to_owned(), mean, 0.0)
    }
}

/// Off-policy value of a rule from test data: smooth the test outcomes over
/// (observed dose, recommended dose) on standardized axes, then average the
/// smooth on the diagonal where the observed dose equals the
/// recommendation. A rule recommending one common dose collapses to a
/// one-axis smooth of the outcome in the observed dose, read at that common
/// dose.
pub fn estimate_value_test(
    test: &Dataset,
    doses: ArrayView1<f64>,
    config: &ValueSmootherConfig,
) -> Result<ValueEstimate, DoseError> {
    config.validate()?;
    let n = test.n();
    if doses.len() != n {
        return Err(DoseError::Data(format!(
            "{} recommended doses for {} test rows",
            doses.len(),
            n
        )));
    }
    if doses.iter().any(|d| !d.is_finite()) {
        return Err(DoseError::Data("recommended doses contain a non-finite value".into()));
    }
    let y_bar = test.y.sum() / n as f64;
    let y_c = test.y.mapv(|v| v - y_bar);
    let (a_std, a_mean, a_sd) = standardize(test.a.view());
    if a_sd == 0.0 {
        return Err(DoseError::Data("observed doses are constant; nothing to smooth over".into()));
    }
    let pen = PenaltyMatrix::difference(config.penalty_order, config.num_basis)?;

    let d_max = doses.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let d_min = doses.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if d_max - d_min <= 1e-12 * (1.0 + d_max.abs()) {
        let basis = SplineBasis::from_values(a_std.view(), config.num_basis, config.degree)?;
        let b = basis.basis_matrix(a_std.view());
        let inert = PenaltyMatrix::empty(config.num_basis);
        let sel = select_lambdas(
            b.view(),
            y_c.view(),
            &pen,
            &inert,
            Family::Gaussian,
            &config.lambda_grid,
            None,
        )?;
        let at = Array1::from_elem(1, (doses[0] - a_mean) / a_sd);
        let value = y_bar + basis.basis_matrix(at.view()).dot(&sel.fit.theta)[0];
        return Ok(ValueEstimate { value, degenerate_doses: true });
    }

    let (f_std, _, _) = standardize(doses);
    let basis_a = SplineBasis::from_values(a_std.view(), config.num_basis, config.degree)?;
    let basis_f = SplineBasis::from_values(f_std.view(), config.num_basis, config.degree)?;
    let b_a = basis_a.basis_matrix(a_std.view());
    let b_f = basis_f.basis_matrix(f_std.view());
    let design = row_kronecker(b_a.view(), b_f.view())?;
    let (tp_a, tp_f) = tensor_penalties(&pen, &pen, config.num_basis, config.num_basis)?;
    let sel = select_lambdas(
        design.view(),
        y_c.view(),
        &tp_a,
        &tp_f,
        Family::Gaussian,
        &config.lambda_grid,
        None,
    )?;
    // The diagonal: the recommended dose standardized by the observed-dose
    // axis on one side and by its own axis on the other.
    let diag_a = doses.mapv(|d| (d - a_mean) / a_sd);
    let e_a = basis_a.basis_matrix(diag_a.view());
    let e_f = basis_f.basis_matrix(f_std.view());
    let diag = row_kronecker(e_a.view(), e_f.view())?;
    let fitted = diag.dot(&sel.fit.theta);
    let value = y_bar + fitted.sum() / n as f64;
    Ok(ValueEstimate { value, degenerate_doses: false })
}

/// How a reported value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueMethod {
    #[serde(rename = "oracle-scenario")]
    OracleScenario,
    #[serde(rename = "smoother")]
    Smoother,
}

impl ValueMethod {
    pub fn name(self) -> &'static str {
        match self {
            ValueMethod::OracleScenario => "oracle-scenario",
            ValueMethod::Smoother => "smoother",
        }
    }
}

/// A rule applied to a dataset, together with its estimated value.
#[derive(Debug, Clone)]
pub struct DoseRuleEvaluation {
    pub doses: Array1<f64>,
    pub value: f64,
    pub method: ValueMethod,
    pub grid_size: usize,
}
