//! File formats: dataset CSV input, the model JSON document, benchmark CSV
//! output, and atomic writes for everything produced.
//!
//! Floats are written with the shortest representation that round-trips
//! exactly, so reading a written file reproduces every number bit for bit.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::SplineBasis;
use crate::family::Family;
use crate::model::{Dataset, EffectKind, FinalSurface, MainTerm, ModelError, SimslModel};
use crate::simbench::CellResult;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV parse error at line {line}, column {column}: {message}")]
    Parse { line: u64, column: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid file contents: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl IoError {
    pub fn is_user(&self) -> bool {
        match self {
            IoError::Model(e) => e.is_user(),
            _ => true,
        }
    }
}

fn missing_column(name: &str, role: &str, headers: &[String]) -> IoError {
    IoError::Data(format!(
        "{role} column '{name}' not found; the file has columns: {}",
        headers.join(", ")
    ))
}

/// Read a dataset from a headed CSV file. `covariates` selects columns by
/// name in the given order; `None` takes every column other than the
/// outcome and the dose, in file order.
pub fn read_dataset_csv(
    path: &Path,
    outcome: &str,
    dose: &str,
    covariates: Option<&[String]>,
) -> Result<Dataset, IoError> {
    let file = std::fs::File::open(path).map_err(|e| IoError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    read_dataset_from(file, outcome, dose, covariates)
}

/// Same as [`read_dataset_csv`], from any reader.
pub fn read_dataset_from(
    source: impl std::io::Read,
    outcome: &str,
    dose: &str,
    covariates: Option<&[String]>,
) -> Result<Dataset, IoError> {
    if outcome == dose {
        return Err(IoError::Data(format!(
            "outcome and dose both name the column '{outcome}'"
        )));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = find(outcome).ok_or_else(|| missing_column(outcome, "outcome", &headers))?;
    let a_col = find(dose).ok_or_else(|| missing_column(dose, "dose", &headers))?;
    let x_cols: Vec<usize> = match covariates {
        Some(names) => {
            let mut cols = Vec::with_capacity(names.len());
            for name in names {
                let c = find(name).ok_or_else(|| missing_column(name, "covariate", &headers))?;
                if c == y_col || c == a_col {
                    return Err(IoError::Data(format!(
                        "covariate '{name}' is already used as the outcome or dose"
                    )));
                }
                cols.push(c);
            }
            cols
        }
        None => (0..headers.len()).filter(|c| *c != y_col && *c != a_col).collect(),
    };
    if x_cols.is_empty() {
        return Err(IoError::Data("no covariate columns left after outcome and dose".into()));
    }

    let parse = |record: &csv::StringRecord, col: usize| -> Result<f64, IoError> {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = record.get(col).ok_or_else(|| IoError::Parse {
            line,
            column: col + 1,
            message: "field missing".into(),
        })?;
        f64::from_str(field.trim()).map_err(|_| IoError::Parse {
            line,
            column: col + 1,
            message: format!("cannot parse '{field}' as a number"),
        })
    };

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut flat = Vec::new();
    for record in reader.records() {
        let record = record?;
        y.push(parse(&record, y_col)?);
        a.push(parse(&record, a_col)?);
        for c in &x_cols {
            flat.push(parse(&record, *c)?);
        }
    }
    if y.is_empty() {
        return Err(IoError::Data("the file has no data rows".into()));
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, x_cols.len()), flat)
        .expect("row-major covariate layout");
    let names = x_cols.iter().map(|c| headers[*c].clone()).collect();
    Ok(Dataset::new(Array1::from(y), Array1::from(a), x, Some(names))?)
}

/// Read the named numeric columns from a headed CSV file, in the order
/// given. This is the prediction-time path: the caller supplies the
/// covariate names stored in a fitted model.
pub fn read_columns_csv(path: &Path, names: &[String]) -> Result<Array2<f64>, IoError> {
    if names.is_empty() {
        return Err(IoError::Data("no columns requested".into()));
    }
    let file = std::fs::File::open(path).map_err(|e| IoError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut cols = Vec::with_capacity(names.len());
    for name in names {
        let c = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| missing_column(name, "covariate", &headers))?;
        cols.push(c);
    }
    let mut flat = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for c in &cols {
            let field = record.get(*c).ok_or_else(|| IoError::Parse {
                line,
                column: c + 1,
                message: "field missing".into(),
            })?;
            let value = f64::from_str(field.trim()).map_err(|_| IoError::Parse {
                line,
                column: c + 1,
                message: format!("cannot parse '{field}' as a number"),
            })?;
            if !value.is_finite() {
                return Err(IoError::Parse {
                    line,
                    column: c + 1,
                    message: format!("non-finite value {value}"),
                });
            }
            flat.push(value);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(IoError::Data("the file has no data rows".into()));
    }
    Ok(Array2::from_shape_vec((rows, cols.len()), flat).expect("row-major layout"))
}

/// Write a dataset as a headed CSV file with the given outcome and dose
/// column names followed by the covariate columns.
pub fn write_dataset_csv(
    path: &Path,
    data: &Dataset,
    outcome: &str,
    dose: &str,
) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(outcome);
    out.push(',');
    out.push_str(dose);
    for name in &data.x_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..data.n() {
        let _ = write!(out, "{},{}", data.y[i], data.a[i]);
        for j in 0..data.p() {
            let _ = write!(out, ",{}", data.x[[i, j]]);
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// The serialized form of a fitted model. The constrained step of the
/// alternating fit is diagnostic state and is not persisted; everything
/// prediction needs is here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub family: Family,
    pub beta: Vec<f64>,
    pub knots_u: Vec<f64>,
    pub knots_a: Vec<f64>,
    pub degree: usize,
    /// Row-major: theta[i][j] multiplies u-basis i and dose-basis j.
    pub theta: Vec<Vec<f64>>,
    pub lambda_u: f64,
    pub lambda_a: f64,
    pub intercept: f64,
    pub u_range: [f64; 2],
    pub a_range: [f64; 2],
    pub column_names: Vec<String>,
    pub converged: bool,
    pub outer_iterations: usize,
    #[serde(default)]
    pub main_effect_terms: Vec<MainTermDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainTermDocument {
    pub column: usize,
    pub kind: EffectKind,
    /// Knot vector for smooth terms; absent for linear terms.
    pub knots: Option<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub center: f64,
}

impl ModelDocument {
    pub fn from_model(model: &SimslModel) -> Self {
        let surface = &model.surface;
        ModelDocument {
            family: model.family,
            beta: model.beta.to_vec(),
            knots_u: surface.basis_u.knots().to_vec(),
            knots_a: surface.basis_a.knots().to_vec(),
            degree: surface.basis_u.degree(),
            theta: surface.theta.outer_iter().map(|row| row.to_vec()).collect(),
            lambda_u: surface.lambda_u,
            lambda_a: surface.lambda_a,
            intercept: surface.intercept,
            u_range: [model.u_range.0, model.u_range.1],
            a_range: [model.a_range.0, model.a_range.1],
            column_names: model.column_names.clone(),
            converged: model.converged,
            outer_iterations: model.outer_iterations,
            main_effect_terms: surface
                .main_terms
                .iter()
                .map(|t| MainTermDocument {
                    column: t.column,
                    kind: t.kind,
                    knots: t.basis.as_ref().map(|b| b.knots().to_vec()),
                    coefficients: t.coefficients.to_vec(),
                    center: t.center,
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<SimslModel, IoError> {
        let basis_u = SplineBasis::from_knots(self.knots_u, self.degree)
            .map_err(|e| IoError::Data(format!("index-axis knots: {e}")))?;
        let basis_a = SplineBasis::from_knots(self.knots_a, self.degree)
            .map_err(|e| IoError::Data(format!("dose-axis knots: {e}")))?;
        if self.beta.len() != self.column_names.len() {
            return Err(IoError::Data(format!(
                "{} coefficients against {} column names",
                self.beta.len(),
                self.column_names.len()
            )));
        }
        let (rows, cols) = (basis_u.num_basis(), basis_a.num_basis());
        if self.theta.len() != rows || self.theta.iter().any(|r| r.len() != cols) {
            return Err(IoError::Data(format!(
                "theta must be {rows} rows of {cols} coefficients"
            )));
        }
        let theta = Array2::from_shape_vec(
            (rows, cols),
            self.theta.into_iter().flatten().collect(),
        )
        .expect("checked theta layout");
        let mut main_terms = Vec::with_capacity(self.main_effect_terms.len());
        for term in self.main_effect_terms {
            let basis = match (term.kind, term.knots) {
                (EffectKind::Smooth, Some(knots)) => {
                    let b = SplineBasis::from_knots(knots, self.degree).map_err(|e| {
                        IoError::Data(format!("main-effect knots for column {}: {e}", term.column))
                    })?;
                    if term.coefficients.len() != b.num_basis() {
                        return Err(IoError::Data(format!(
                            "main effect on column {} has {} coefficients for {} basis functions",
                            term.column,
                            term.coefficients.len(),
                            b.num_basis()
                        )));
                    }
                    Some(b)
                }
                (EffectKind::Smooth, None) => {
                    return Err(IoError::Data(format!(
                        "smooth main effect on column {} is missing its knots",
                        term.column
                    )));
                }
                (EffectKind::Linear, _) => {
                    if term.coefficients.len() != 1 {
                        return Err(IoError::Data(format!(
                            "linear main effect on column {} must have one coefficient",
                            term.column
                        )));
                    }
                    None
                }
            };
            main_terms.push(MainTerm {
                column: term.column,
                kind: term.kind,
                basis,
                coefficients: Array1::from(term.coefficients),
                center: term.center,
            });
        }
        Ok(SimslModel {
            family: self.family,
            beta: Array1::from(self.beta),
            surface: FinalSurface {
                basis_u,
                basis_a,
                theta,
                lambda_u: self.lambda_u,
                lambda_a: self.lambda_a,
                intercept: self.intercept,
                main_terms,
            },
            constrained: None,
            converged: self.converged,
            outer_iterations: self.outer_iterations,
            column_names: self.column_names,
            u_range: (self.u_range[0], self.u_range[1]),
            a_range: (self.a_range[0], self.a_range[1]),
        })
    }
}

pub fn write_model_json(model: &SimslModel, path: &Path) -> Result<(), IoError> {
    let doc = ModelDocument::from_model(model);
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_model_json(path: &Path) -> Result<SimslModel, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    let doc: ModelDocument = serde_json::from_slice(&bytes)?;
    doc.into_model()
}

/// Write through a temporary file in the target directory, then rename, so
/// a crash never leaves a half-written file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| IoError::File {
        path: parent.display().to_string(),
        source: e,
    })?;
    tmp.write_all(bytes).map_err(|e| IoError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    tmp.persist(path).map_err(|e| IoError::File {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// `row,dose` with 1-based row numbers.
pub fn doses_csv(doses: ArrayView1<f64>) -> String {
    let mut out = String::from("row,dose\n");
    for (i, d) in doses.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, d);
    }
    out
}

pub fn write_doses_csv(path: &Path, doses: ArrayView1<f64>) -> Result<(), IoError> {
    write_atomic(path, doses_csv(doses).as_bytes())
}

/// One line per benchmark cell.
pub fn benchmark_summary_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("scenario,n,mean_value,sd_value,replicates,failures\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.scenario, c.n, c.mean_value, c.sd_value, c.replicates, c.failures
        );
    }
    out
}

/// One line per successful replicate. The fit time is wall clock and is the
/// one column exempt from the determinism guarantee.
pub fn benchmark_details_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("scenario,n,replicate,value,converged,fit_seconds\n");
    for c in cells {
        for r in &c.details {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.scenario, c.n, r.replicate, r.value, r.converged, r.fit_seconds
            );
        }
    }
    out
}
