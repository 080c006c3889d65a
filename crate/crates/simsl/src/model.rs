//! The alternating fit of the single-index surface model.
//!
//! Step 1 estimates the interaction surface at a fixed index direction by
//! penalized (IRLS) regression on the constrained tensor design. Step 2
//! linearizes the surface in the index and updates the direction by
//! (weighted) least squares. The loop alternates until the direction
//! stabilizes, then one final unconstrained tensor fit at the converged
//! index is stored and used for every downstream prediction.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use thiserror::Error;

use crate::basis::{
    absorb_sum_to_zero, row_kronecker, tensor_penalties, BasisError, ConstrainedTensorDesign,
    PenaltyMatrix, SplineBasis, TensorOptions,
};
use crate::family::Family;
use crate::penreg::{
    pirls_fit, select_lambdas, weighted_ls, FitError, LambdaSelection, PenalizedFit,
};
use crate::rng;

/// Tag word separating bootstrap substreams from every other use of a seed.
const BOOT_TAG: u64 = 0x626f_6f74;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the fitted surface is flat in the index direction; beta is not identified")]
    FlatIndex,
    #[error("the index update produced a zero direction")]
    DegenerateIndexUpdate,
    #[error("bootstrap unstable: {failed} of {total} replicates failed to fit")]
    BootstrapUnstable { failed: usize, total: usize },
}

impl ModelError {
    /// True for errors caused by the caller's inputs rather than by the
    /// numerics of a fit.
    pub fn is_user(&self) -> bool {
        matches!(self, ModelError::Data(_) | ModelError::Config(_))
            || matches!(self, ModelError::Basis(e) if e.is_user())
    }
}

/// A regression problem: outcome, dose, and covariates with their names.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Array1<f64>,
    pub a: Array1<f64>,
    pub x: Array2<f64>,
    pub x_names: Vec<String>,
}

impl Dataset {
    /// Validate dimensions and finiteness. Column names default to
    /// `x1..xp` when not supplied.
    pub fn new(
        y: Array1<f64>,
        a: Array1<f64>,
        x: Array2<f64>,
        x_names: Option<Vec<String>>,
    ) -> Result<Self, ModelError> {
        let n = y.len();
        if a.len() != n || x.nrows() != n {
            return Err(ModelError::Data(format!(
                "outcome has {} rows, dose {}, covariates {}",
                n,
                a.len(),
                x.nrows()
            )));
        }
        if n < 2 {
            return Err(ModelError::Data("at least two observations required".into()));
        }
        if x.ncols() == 0 {
            return Err(ModelError::Data("at least one covariate required".into()));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::Data(format!("outcome is not finite at row {}", i + 1)));
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::Data(format!("dose is not finite at row {}", i + 1)));
        }
        if let Some(((i, j), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ModelError::Data(format!(
                "covariate {} is not finite at row {}",
                j + 1,
                i + 1
            )));
        }
        let x_names = match x_names {
            Some(names) => {
                if names.len() != x.ncols() {
                    return Err(ModelError::Data(format!(
                        "{} column names for {} covariates",
                        names.len(),
                        x.ncols()
                    )));
                }
                names
            }
            None => (1..=x.ncols()).map(|j| format!("x{j}")).collect(),
        };
        Ok(Dataset { y, a, x, x_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// How one covariate enters the additive main-effect adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Smooth,
    Linear,
}

/// A designated main-effect covariate (zero-based column index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainEffect {
    pub column: usize,
    pub kind: EffectKind,
}

/// Everything the fit needs beyond the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimslConfig {
    pub family: Family,
    pub num_basis_u: usize,
    pub num_basis_a: usize,
    pub degree: usize,
    pub penalty_order: usize,
    pub lambda_grid: Vec<f64>,
    pub max_outer_iterations: usize,
    pub beta_tolerance: f64,
    pub max_beta_halvings: usize,
    pub main_effects: Vec<MainEffect>,
}

impl Default for SimslConfig {
    fn default() -> Self {
        SimslConfig {
            family: Family::Gaussian,
            num_basis_u: 8,
            num_basis_a: 8,
            degree: 3,
            penalty_order: 2,
            lambda_grid: crate::penreg::default_lambda_grid(),
            max_outer_iterations: 30,
            beta_tolerance: 1e-4,
            max_beta_halvings: 10,
            main_effects: Vec::new(),
        }
    }
}

impl SimslConfig {
    /// Check the settings against a covariate count before fitting.
    pub fn validate(&self, p: usize) -> Result<(), ModelError> {
        if self.degree == 0 {
            return Err(ModelError::Config("degree must be at least 1".into()));
        }
        for (nb, axis) in [(self.num_basis_u, "index"), (self.num_basis_a, "dose")] {
            if nb <= self.degree {
                return Err(ModelError::Config(format!(
                    "num_basis on the {axis} axis must exceed the degree"
                )));
            }
            if self.penalty_order == 0 || self.penalty_order >= nb {
                return Err(ModelError::Config(format!(
                    "penalty order {} is out of range for {} basis functions",
                    self.penalty_order, nb
                )));
            }
        }
        if self.lambda_grid.is_empty()
            || self.lambda_grid.iter().any(|l| !l.is_finite() || *l < 0.0)
        {
            return Err(ModelError::Config(
                "lambda grid must be non-empty, finite, and non-negative".into(),
            ));
        }
        if self.max_outer_iterations == 0 {
            return Err(ModelError::Config("max_outer_iterations must be positive".into()));
        }
        if !(self.beta_tolerance > 0.0) {
            return Err(ModelError::Config("beta_tolerance must be positive".into()));
        }
        let mut seen = vec![false; p];
        for effect in &self.main_effects {
            if effect.column >= p {
                return Err(ModelError::Config(format!(
                    "main effect column {} out of range for {} covariates",
                    effect.column, p
                )));
            }
            if seen[effect.column] {
                return Err(ModelError::Config(format!(
                    "main effect column {} listed twice",
                    effect.column
                )));
            }
            seen[effect.column] = true;
        }
        Ok(())
    }

    fn tensor_options(&self) -> TensorOptions {
        TensorOptions {
            num_basis_u: self.num_basis_u,
            num_basis_a: self.num_basis_a,
            degree: self.degree,
            penalty_order: self.penalty_order,
        }
    }
}

/// Normalize to the identifiable parameter set: unit length, first nonzero
/// coordinate positive. Returns None when the vector is numerically zero.
pub(crate) fn normalize_direction(mut b: Array1<f64>) -> Option<Array1<f64>> {
    let norm = b.dot(&b).sqrt();
    if !norm.is_finite() || norm <= 1e-12 {
        return None;
    }
    b /= norm;
    let lead = b.iter().find(|v| v.abs() > 1e-12)?;
    if *lead < 0.0 {
        b = -b;
    }
    Some(b)
}

/// Starting direction: ordinary least squares of y on the linearized
/// interaction columns X_j (A - mean(A)), normalized into the parameter set.
/// Falls back to the first coordinate direction when the regression is
/// singular or returns a zero vector.
pub fn init_beta(data: &Dataset) -> Array1<f64> {
    let (n, p) = (data.n(), data.p());
    let a_bar = data.a.sum() / n as f64;
    let mut z = Array2::zeros((n, p));
    for i in 0..n {
        let w = data.a[i] - a_bar;
        for j in 0..p {
            z[[i, j]] = data.x[[i, j]] * w;
        }
    }
    let fallback = || {
        let mut e1 = Array1::zeros(p);
        e1[0] = 1.0;
        e1
    };
    match weighted_ls(z.view(), data.y.view(), None) {
        Ok(b) => normalize_direction(b).unwrap_or_else(fallback),
        Err(_) => fallback(),
    }
}

/// The constrained interaction design at one index direction. Exposed so
/// the constrained fit can be inspected; `fit_simsl` drives it internally.
pub fn build_interaction_design(
    data: &Dataset,
    beta: ArrayView1<f64>,
    config: &SimslConfig,
) -> Result<ConstrainedTensorDesign, ModelError> {
    if beta.len() != data.p() {
        return Err(ModelError::Data(format!(
            "direction has {} entries for {} covariates",
            beta.len(),
            data.p()
        )));
    }
    let u = data.x.dot(&beta);
    Ok(ConstrainedTensorDesign::build(u.view(), data.a.view(), &config.tensor_options())?)
}

/// Main-effect pieces that do not depend on the index direction, built once
/// per fit and appended to every step design.
struct MainParts {
    design: Array2<f64>,
    metas: Vec<MainMeta>,
    /// (column offset within the main block, penalty rows) per smooth term.
    penalties: Vec<(usize, PenaltyMatrix)>,
    width: usize,
}

struct MainMeta {
    column: usize,
    kind: EffectKind,
    basis: Option<SplineBasis>,
    z: Option<Array2<f64>>,
    center: f64,
    start: usize,
    width: usize,
}

fn build_main_parts(data: &Dataset, config: &SimslConfig) -> Result<MainParts, ModelError> {
    let n = data.n();
    let mut blocks: Vec<Array2<f64>> = Vec::new();
    let mut metas = Vec::new();
    let mut penalties = Vec::new();
    let mut width = 0usize;
    for effect in &config.main_effects {
        let col = data.x.column(effect.column);
        match effect.kind {
            EffectKind::Smooth => {
                let basis = SplineBasis::from_values(col, config.num_basis_u, config.degree)?;
                let b = basis.basis_matrix(col);
                let pen =
                    PenaltyMatrix::difference(config.penalty_order, config.num_basis_u)?;
                let constrained = absorb_sum_to_zero(b.view(), &pen)?;
                let w = constrained.design.ncols();
                penalties.push((width, constrained.penalty));
                metas.push(MainMeta {
                    column: effect.column,
                    kind: effect.kind,
                    basis: Some(basis),
                    z: Some(constrained.z),
                    center: 0.0,
                    start: width,
                    width: w,
                });
                blocks.push(constrained.design);
                width += w;
            }
            EffectKind::Linear => {
                let center = col.sum() / n as f64;
                let centered = col.mapv(|v| v - center).insert_axis(ndarray::Axis(1));
                metas.push(MainMeta {
                    column: effect.column,
                    kind: effect.kind,
                    basis: None,
                    z: None,
                    center,
                    start: width,
                    width: 1,
                });
                blocks.push(centered);
                width += 1;
            }
        }
    }
    let mut design = Array2::zeros((n, width));
    for (meta, block) in metas.iter().zip(&blocks) {
        design
            .slice_mut(s![.., meta.start..meta.start + meta.width])
            .assign(block);
    }
    Ok(MainParts { design, metas, penalties, width })
}

/// One step design: interaction block, main-effect blocks, and an
/// unpenalized intercept column for the discrete families.
struct StepDesign {
    design: Array2<f64>,
    penalty_u: PenaltyMatrix,
    penalty_a: PenaltyMatrix,
    interaction_cols: usize,
    intercept_col: Option<usize>,
}

fn assemble_design(
    interaction: ArrayView2<f64>,
    pen_u: &PenaltyMatrix,
    pen_a: &PenaltyMatrix,
    mains: &MainParts,
    with_intercept: bool,
) -> StepDesign {
    let n = interaction.nrows();
    let q_int = interaction.ncols();
    let total = q_int + mains.width + usize::from(with_intercept);
    let mut design = Array2::zeros((n, total));
    design.slice_mut(s![.., ..q_int]).assign(&interaction);
    if mains.width > 0 {
        design
            .slice_mut(s![.., q_int..q_int + mains.width])
            .assign(&mains.design);
    }
    let intercept_col = if with_intercept {
        design.column_mut(total - 1).fill(1.0);
        Some(total - 1)
    } else {
        None
    };

    let smooth_rows: usize = mains.penalties.iter().map(|(_, p)| p.matrix.nrows()).sum();
    let mut pu = Array2::zeros((pen_u.matrix.nrows() + smooth_rows, total));
    pu.slice_mut(s![..pen_u.matrix.nrows(), ..q_int]).assign(&pen_u.matrix);
    let mut row = pen_u.matrix.nrows();
    for (offset, pen) in &mains.penalties {
        let (r, c) = (pen.matrix.nrows(), pen.matrix.ncols());
        pu.slice_mut(s![row..row + r, q_int + offset..q_int + offset + c])
            .assign(&pen.matrix);
        row += r;
    }
    let mut pa = Array2::zeros((pen_a.matrix.nrows(), total));
    pa.slice_mut(s![.., ..q_int]).assign(&pen_a.matrix);

    StepDesign {
        design,
        penalty_u: PenaltyMatrix { matrix: pu, order: pen_u.order },
        penalty_a: PenaltyMatrix { matrix: pa, order: pen_a.order },
        interaction_cols: q_int,
        intercept_col,
    }
}

/// Surface estimation at a fixed index: GCV-selected penalized fit of the
/// assembled design against the centered outcome (gaussian) or the raw
/// outcome through IRLS (discrete families).
fn fit_theta_step(
    step: &StepDesign,
    target: ArrayView1<f64>,
    config: &SimslConfig,
) -> Result<LambdaSelection, ModelError> {
    Ok(select_lambdas(
        step.design.view(),
        target,
        &step.penalty_u,
        &step.penalty_a,
        config.family,
        &config.lambda_grid,
        None,
    )?)
}

/// The linearized index update. `working_residuals` and `weights` come from
/// the current Step-1 fit; the derivative of the constrained surface at the
/// observed points forms the linearization X* = diag(dg/du) X.
fn update_beta_step(
    data: &Dataset,
    tensor: &ConstrainedTensorDesign,
    theta_int: ArrayView1<f64>,
    u: ArrayView1<f64>,
    working_residuals: ArrayView1<f64>,
    weights: Option<ArrayView1<f64>>,
    beta_tilde: ArrayView1<f64>,
) -> Result<Array1<f64>, ModelError> {
    let derivs = tensor.eval_deriv_u(u, data.a.view(), theta_int);
    let g_vals = tensor.eval(u, data.a.view(), theta_int);
    let scale = 1.0 + g_vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if derivs.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 1e-10 * scale {
        return Err(ModelError::FlatIndex);
    }
    let (n, p) = (data.n(), data.p());
    let mut xstar = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            xstar[[i, j]] = derivs[i] * data.x[[i, j]];
        }
    }
    let response = &working_residuals + &xstar.dot(&beta_tilde);
    let raw = weighted_ls(xstar.view(), response.view(), weights)?;
    normalize_direction(raw).ok_or(ModelError::DegenerateIndexUpdate)
}

/// The Step-1 penalized objective at a fit: deviance plus both quadratic
/// smoothness penalties at the fit's smoothing parameters.
fn penalized_objective(
    family: Family,
    y: ArrayView1<f64>,
    fit: &PenalizedFit,
    step: &StepDesign,
) -> f64 {
    let pu = step.penalty_u.matrix.dot(&fit.theta);
    let pa = step.penalty_a.matrix.dot(&fit.theta);
    deviance(family, y, fit.eta.view())
        + fit.lambda_u * pu.dot(&pu)
        + fit.lambda_a * pa.dot(&pa)
}

fn deviance(family: Family, y: ArrayView1<f64>, eta: ArrayView1<f64>) -> f64 {
    match family {
        Family::Gaussian => y
            .iter()
            .zip(eta.iter())
            .map(|(yi, ei)| (yi - ei) * (yi - ei))
            .sum(),
        _ => {
            let mut ll = 0.0;
            for (yi, ei) in y.iter().zip(eta.iter()) {
                ll += yi * ei - family.cumulant(*ei);
            }
            -2.0 * ll
        }
    }
}

/// The last constrained Step-1 fit, kept on the model for diagnostics.
#[derive(Debug, Clone)]
pub struct ConstrainedStep {
    pub tensor: ConstrainedTensorDesign,
    pub fit: PenalizedFit,
    pub interaction_cols: usize,
}

/// One additive main-effect term of the final fit, with coefficients
/// composed back into the original basis coordinates.
#[derive(Debug, Clone)]
pub struct MainTerm {
    pub column: usize,
    pub kind: EffectKind,
    pub basis: Option<SplineBasis>,
    /// Length num_basis for smooth terms; the single slope for linear terms.
    pub coefficients: Array1<f64>,
    /// Mean subtracted from the covariate (linear terms only).
    pub center: f64,
}

impl MainTerm {
    pub fn eval(&self, x: ArrayView1<f64>) -> Array1<f64> {
        match self.kind {
            EffectKind::Smooth => {
                let basis = self.basis.as_ref().expect("smooth term basis");
                basis.basis_matrix(x).dot(&self.coefficients)
            }
            EffectKind::Linear => x.mapv(|v| (v - self.center) * self.coefficients[0]),
        }
    }
}

/// The final unconstrained tensor fit that serves all prediction.
#[derive(Debug, Clone)]
pub struct FinalSurface {
    pub basis_u: SplineBasis,
    pub basis_a: SplineBasis,
    /// Row i, column j: coefficient of u-basis i times a-basis j.
    pub theta: Array2<f64>,
    pub lambda_u: f64,
    pub lambda_a: f64,
    pub intercept: f64,
    pub main_terms: Vec<MainTerm>,
}

impl FinalSurface {
    /// Surface values g(u_i, a_i) at point pairs; inputs beyond the training
    /// range evaluate at the clamped boundary.
    pub fn g_values(&self, u: ArrayView1<f64>, a: ArrayView1<f64>) -> Array1<f64> {
        let b_u = self.basis_u.basis_matrix(u);
        let b_a = self.basis_a.basis_matrix(a);
        (&b_u.dot(&self.theta) * &b_a).sum_axis(ndarray::Axis(1))
    }

    /// Surface values on the full u-by-a lattice.
    pub fn g_lattice(&self, u: ArrayView1<f64>, a: ArrayView1<f64>) -> Array2<f64> {
        let b_u = self.basis_u.basis_matrix(u);
        let b_a = self.basis_a.basis_matrix(a);
        b_u.dot(&self.theta).dot(&b_a.t())
    }

    /// Partial derivative of the surface in u at point pairs.
    pub fn deriv_u_values(&self, u: ArrayView1<f64>, a: ArrayView1<f64>) -> Array1<f64> {
        let b_u = self.basis_u.deriv_matrix(u);
        let b_a = self.basis_a.basis_matrix(a);
        (&b_u.dot(&self.theta) * &b_a).sum_axis(ndarray::Axis(1))
    }
}

/// A fitted single-index surface model.
#[derive(Debug, Clone)]
pub struct SimslModel {
    pub family: Family,
    pub beta: Array1<f64>,
    pub surface: FinalSurface,
    /// Last constrained Step-1 fit (diagnostics; not persisted).
    pub constrained: Option<ConstrainedStep>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub column_names: Vec<String>,
    pub u_range: (f64, f64),
    pub a_range: (f64, f64),
}

impl SimslModel {
    /// Index values u = X beta.
    pub fn index(&self, x: ArrayView2<f64>) -> Result<Array1<f64>, ModelError> {
        if x.ncols() != self.beta.len() {
            return Err(ModelError::Data(format!(
                "{} covariate columns, model was fit with {}",
                x.ncols(),
                self.beta.len()
            )));
        }
        Ok(x.dot(&self.beta))
    }

    /// Link-scale predictions: intercept + g(x beta, a) + main effects,
    /// with the index and dose clamped into the training ranges.
    pub fn predict_surface(
        &self,
        x: ArrayView2<f64>,
        a: ArrayView1<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        if x.nrows() != a.len() {
            return Err(ModelError::Data(format!(
                "{} covariate rows against {} doses",
                x.nrows(),
                a.len()
            )));
        }
        let u = self.index(x)?;
        let mut eta = self.surface.g_values(u.view(), a);
        eta += self.surface.intercept;
        for term in &self.surface.main_terms {
            eta = eta + term.eval(x.column(term.column));
        }
        Ok(eta)
    }

    /// Response-scale predictions through the family's inverse link.
    pub fn predict_mean(
        &self,
        x: ArrayView2<f64>,
        a: ArrayView1<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        let family = self.family;
        Ok(self.predict_surface(x, a)?.mapv(|e| family.inverse_link(e)))
    }

    /// Partial derivative of the final surface in the index at (x beta, a).
    pub fn partial_deriv_u(
        &self,
        x: ArrayView2<f64>,
        a: ArrayView1<f64>,
    ) -> Result<Array1<f64>, ModelError> {
        if x.nrows() != a.len() {
            return Err(ModelError::Data(format!(
                "{} covariate rows against {} doses",
                x.nrows(),
                a.len()
            )));
        }
        let u = self.index(x)?;
        Ok(self.surface.deriv_u_values(u.view(), a))
    }
}

/// Fit the model: alternate surface and index estimation from the least
/// squares initializer, then refit the surface unconstrained at the final
/// index. Non-convergence of the outer loop is reported in the flag, not as
/// an error.
pub fn fit_simsl(data: &Dataset, config: &SimslConfig) -> Result<SimslModel, ModelError> {
    config.validate(data.p())?;
    if let Some(i) = data.y.iter().position(|y| !config.family.response_ok(*y)) {
        return Err(ModelError::Data(format!(
            "outcome at row {} is outside the {} family support",
            i + 1,
            config.family.name()
        )));
    }

    let n = data.n();
    let gaussian = config.family == Family::Gaussian;
    let y_bar = data.y.sum() / n as f64;
    let target = if gaussian {
        data.y.mapv(|v| v - y_bar)
    } else {
        data.y.clone()
    };
    let mains = build_main_parts(data, config)?;

    let mut beta = if data.p() == 1 {
        Array1::from_elem(1, 1.0)
    } else {
        init_beta(data)
    };
    let mut converged = false;
    let mut outer_iterations = 0;
    let mut last_step: Option<ConstrainedStep> = None;

    for iter in 1..=config.max_outer_iterations {
        outer_iterations = iter;
        let u = data.x.dot(&beta);
        let tensor =
            ConstrainedTensorDesign::build(u.view(), data.a.view(), &config.tensor_options())?;
        let step = assemble_design(
            tensor.design.view(),
            &tensor.penalty_u,
            &tensor.penalty_a,
            &mains,
            !gaussian,
        );
        let selection = fit_theta_step(&step, target.view(), config)?;
        let fit = selection.fit;
        let q_int = step.interaction_cols;
        let theta_int = fit.theta.slice(s![..q_int]).to_owned();

        last_step = Some(ConstrainedStep {
            tensor: tensor.clone(),
            fit: fit.clone(),
            interaction_cols: q_int,
        });

        if data.p() == 1 {
            converged = true;
            break;
        }

        let weights = if gaussian { None } else { Some(fit.weights.view()) };
        let proposal = update_beta_step(
            data,
            &tensor,
            theta_int.view(),
            u.view(),
            fit.working_residuals.view(),
            weights,
            beta.view(),
        )?;

        // Guard the update: the Step-1 penalized objective at the new index
        // (surface refit at this iteration's smoothing parameters) must not
        // increase. Worse candidates are halved toward the current
        // direction; if no halving helps, the current direction is a fixed
        // point and the loop stops.
        let obj_old = penalized_objective(config.family, target.view(), &fit, &step);
        let mut candidate = proposal;
        let mut accepted = false;
        for _ in 0..=config.max_beta_halvings {
            let u_new = data.x.dot(&candidate);
            let tensor_new = ConstrainedTensorDesign::build(
                u_new.view(),
                data.a.view(),
                &config.tensor_options(),
            )?;
            let step_new = assemble_design(
                tensor_new.design.view(),
                &tensor_new.penalty_u,
                &tensor_new.penalty_a,
                &mains,
                !gaussian,
            );
            let refit = pirls_fit(
                step_new.design.view(),
                target.view(),
                &step_new.penalty_u,
                &step_new.penalty_a,
                fit.lambda_u,
                fit.lambda_a,
                config.family,
                None,
            );
            if let Ok(refit) = refit {
                let obj_new =
                    penalized_objective(config.family, target.view(), &refit, &step_new);
                if obj_new.is_finite() && obj_new <= obj_old + 1e-12 * (1.0 + obj_old.abs()) {
                    accepted = true;
                    break;
                }
            }
            let mid = (&candidate + &beta) / 2.0;
            match normalize_direction(mid) {
                Some(m) => candidate = m,
                None => break,
            }
        }
        if !accepted {
            converged = true;
            break;
        }
        let diff = &candidate - &beta;
        let delta = diff.dot(&diff).sqrt();
        beta = candidate;
        if delta < config.beta_tolerance {
            converged = true;
            break;
        }
    }

    let surface = final_refit(data, config, &mains, beta.view(), target.view(), y_bar)?;
    let u_range = surface.basis_u.domain();
    let a_range = surface.basis_a.domain();
    Ok(SimslModel {
        family: config.family,
        beta,
        surface,
        constrained: last_step,
        converged,
        outer_iterations,
        column_names: data.x_names.clone(),
        u_range,
        a_range,
    })
}

/// The final unconstrained tensor fit at the converged index: full
/// row-Kronecker design over fresh marginal bases, main effects appended,
/// smoothing parameters re-selected. The gaussian intercept is the outcome
/// mean; the discrete families estimate an explicit intercept column (the
/// ridge fallback absorbs its collinearity with the unconstrained tensor).
fn final_refit(
    data: &Dataset,
    config: &SimslConfig,
    mains: &MainParts,
    beta: ArrayView1<f64>,
    target: ArrayView1<f64>,
    y_bar: f64,
) -> Result<FinalSurface, ModelError> {
    let gaussian = config.family == Family::Gaussian;
    let u = data.x.dot(&beta);
    let basis_u = SplineBasis::from_values(u.view(), config.num_basis_u, config.degree)?;
    let basis_a = SplineBasis::from_values(data.a.view(), config.num_basis_a, config.degree)?;
    let b_u = basis_u.basis_matrix(u.view());
    let b_a = basis_a.basis_matrix(data.a.view());
    let d_full = row_kronecker(b_u.view(), b_a.view())?;
    let pen_u = PenaltyMatrix::difference(config.penalty_order, config.num_basis_u)?;
    let pen_a = PenaltyMatrix::difference(config.penalty_order, config.num_basis_a)?;
    let (tensor_u, tensor_a) =
        tensor_penalties(&pen_u, &pen_a, config.num_basis_u, config.num_basis_a)?;
    let step = assemble_design(d_full.view(), &tensor_u, &tensor_a, mains, !gaussian);
    let selection = fit_theta_step(&step, target, config)?;
    let fit = selection.fit;

    let q_int = step.interaction_cols;
    let theta = Array2::from_shape_vec(
        (config.num_basis_u, config.num_basis_a),
        fit.theta.slice(s![..q_int]).to_vec(),
    )
    .expect("tensor coefficient layout");
    let intercept = if gaussian {
        y_bar
    } else {
        step.intercept_col.map(|c| fit.theta[c]).unwrap_or(0.0)
    };
    let main_terms = mains
        .metas
        .iter()
        .map(|meta| {
            let coefs = fit.theta.slice(s![q_int + meta.start..q_int + meta.start + meta.width]);
            let coefficients = match meta.kind {
                EffectKind::Smooth => meta.z.as_ref().expect("smooth z").dot(&coefs),
                EffectKind::Linear => coefs.to_owned(),
            };
            MainTerm {
                column: meta.column,
                kind: meta.kind,
                basis: meta.basis.clone(),
                coefficients,
                center: meta.center,
            }
        })
        .collect();

    Ok(FinalSurface {
        basis_u,
        basis_a,
        theta,
        lambda_u: fit.lambda_u,
        lambda_a: fit.lambda_a,
        intercept,
        main_terms,
    })
}

/// Normal-approximation bootstrap intervals for the index coefficients.
#[derive(Debug, Clone)]
pub struct BootstrapCi {
    pub estimate: Array1<f64>,
    pub se: Array1<f64>,
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    pub level: f64,
    pub n_boot: usize,
    pub failures: usize,
}

/// Resample rows with replacement, refit, sign-align each replicate to the
/// full-data estimate, and return beta_j +/- z_(1+level)/2 * sd_j per
/// coordinate. Replicate substreams derive from (seed, replicate index), so
/// results are independent of evaluation order.
pub fn bootstrap_beta_ci(
    data: &Dataset,
    config: &SimslConfig,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi, ModelError> {
    let streams: Vec<[u64; 3]> = (0..n_boot).map(|b| [BOOT_TAG, b as u64, 0]).collect();
    bootstrap_with_streams(data, config, &streams, level, seed)
}

/// Bootstrap with explicit per-replicate stream tags; the public entry
/// derives one stream per replicate index. Duplicated tags reproduce the
/// same resample exactly.
pub(crate) fn bootstrap_with_streams(
    data: &Dataset,
    config: &SimslConfig,
    streams: &[[u64; 3]],
    level: f64,
    seed: u64,
) -> Result<BootstrapCi, ModelError> {
    let n_boot = streams.len();
    if n_boot < 2 {
        return Err(ModelError::Config("n_boot must be at least 2".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(ModelError::Config("confidence level must be in (0, 1)".into()));
    }
    let full = fit_simsl(data, config)?;
    let n = data.n();
    let p = data.p();

    // Replicates are independent and each owns its RNG stream, so they can
    // run on the worker pool; collecting in replicate order keeps the result
    // identical for any worker count.
    let replicate_fits: Vec<Option<Array1<f64>>> = streams
        .par_iter()
        .map(|tags| {
            let mut stream = rng::substream(seed, *tags);
            let mut y = Array1::zeros(n);
            let mut a = Array1::zeros(n);
            let mut x = Array2::zeros((n, p));
            for i in 0..n {
                let k = rng::index(&mut stream, n);
                y[i] = data.y[k];
                a[i] = data.a[k];
                x.row_mut(i).assign(&data.x.row(k));
            }
            let resampled = Dataset::new(y, a, x, Some(data.x_names.clone())).ok()?;
            fit_simsl(&resampled, config).ok().map(|m| m.beta)
        })
        .collect();
    let mut samples: Vec<Array1<f64>> = Vec::with_capacity(n_boot);
    let mut failures = 0usize;
    for fit in replicate_fits {
        match fit {
            Some(mut b) => {
                if b.dot(&full.beta) < 0.0 {
                    b = -b;
                }
                samples.push(b);
            }
            None => failures += 1,
        }
    }
    if failures * 5 > n_boot {
        return Err(ModelError::BootstrapUnstable { failed: failures, total: n_boot });
    }

    let m = samples.len() as f64;
    let mut mean = Array1::<f64>::zeros(p);
    for s in &samples {
        mean = mean + s;
    }
    mean /= m;
    let mut var = Array1::<f64>::zeros(p);
    for s in &samples {
        let d = s - &mean;
        var = var + &(&d * &d);
    }
    let se = if samples.len() > 1 {
        (var / (m - 1.0)).mapv(f64::sqrt)
    } else {
        Array1::zeros(p)
    };
    let z = statrs::distribution::Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0);
    let lower = &full.beta - &se.mapv(|s| z * s);
    let upper = &full.beta + &se.mapv(|s| z * s);
    Ok(BootstrapCi {
        estimate: full.beta,
        se,
        lower,
        upper,
        level,
        n_boot,
        failures,
    })
}
