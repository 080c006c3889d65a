//! Synthetic scenarios and the replication harness used to benchmark the
//! fitted dose rules.
//!
//! Four data-generating processes are built in. The first two draw doses
//! uniformly; the last two share the second scenario's response surface but
//! draw doses from covariate-dependent truncated normals, so the dose is
//! confounded with the covariates. All four generate gaussian outcomes.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::doserule::{self, DoseError};
use crate::model::{fit_simsl, Dataset, ModelError, SimslConfig};
use crate::rng;

/// XOR mask applied to the scenario id so each cell's shared test stream
/// never collides with a training replicate stream.
const TEST_STREAM_XOR: u64 = 0x7465_7374;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown scenario {0}; known scenarios are 1 through 4")]
    UnknownScenario(u32),
    #[error("invalid benchmark input: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dose(#[from] DoseError),
    #[error("scenario {scenario} at n = {n}: {failed} of {total} replicates failed to fit")]
    TooManyFailures { scenario: u32, n: usize, failed: usize, total: usize },
}

impl BenchError {
    pub fn is_user(&self) -> bool {
        match self {
            BenchError::UnknownScenario(_) | BenchError::Data(_) => true,
            BenchError::Model(e) => e.is_user(),
            BenchError::Dose(e) => e.is_user(),
            BenchError::TooManyFailures { .. } => false,
        }
    }
}

/// One of the built-in data-generating processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    pub fn from_id(id: u32) -> Result<Self, BenchError> {
        match id {
            1 => Ok(Scenario::S1),
            2 => Ok(Scenario::S2),
            3 => Ok(Scenario::S3),
            4 => Ok(Scenario::S4),
            other => Err(BenchError::UnknownScenario(other)),
        }
    }

    pub fn id(self) -> u32 {
        match self {
            Scenario::S1 => 1,
            Scenario::S2 => 2,
            Scenario::S3 => 3,
            Scenario::S4 => 4,
        }
    }

    /// Covariate count used when the caller does not override it.
    pub fn default_p(self) -> usize {
        match self {
            Scenario::S1 => 30,
            _ => 10,
        }
    }

    /// Smallest covariate count the mean formula touches.
    pub fn required_p(self) -> usize {
        match self {
            Scenario::S1 => 3,
            _ => 7,
        }
    }

    /// The dose that maximizes the mean response at covariates x.
    pub fn f_opt(self, x: ArrayView1<f64>) -> f64 {
        match self {
            Scenario::S1 => 1.0 + 0.5 * x[0] + 0.5 * x[1],
            _ => {
                let step = if x[0].abs() < 0.5 { 0.6 } else { 1.2 };
                step + x[3] * x[3] + 0.5 * (x[6].abs() + 1.0).ln() - 0.6
            }
        }
    }

    /// Mean outcome at covariates x under dose a.
    pub fn mean_response(self, x: ArrayView1<f64>, a: f64) -> f64 {
        let f = self.f_opt(x);
        match self {
            Scenario::S1 => {
                8.0 + 4.0 * x[0] - 2.0 * x[1] - 2.0 * x[2] - 25.0 * (f - a) * (f - a)
            }
            _ => {
                8.0 + 4.0 * (2.0 * PI * x[1]).cos() - 2.0 * x[3] - 8.0 * x[4] * x[4] * x[4]
                    - 15.0 * (f - a).abs()
            }
        }
    }

    /// Draw one dose for covariate row x. The flag marks a draw that hit a
    /// degenerate truncation interval and was clamped.
    pub fn sample_dose(self, x: ArrayView1<f64>, r: &mut ChaCha8Rng) -> (f64, bool) {
        match self {
            Scenario::S1 | Scenario::S2 => (rng::uniform(r, 0.0, 2.0), false),
            Scenario::S3 => {
                if x[2] < 0.0 {
                    truncnorm_sample(-0.5 + 0.5 * x[0] + 0.5 * x[1], 0.5, 0.0, 2.0, r)
                } else {
                    truncnorm_sample((0.5 + 1.5 * x[1]).abs(), 1.0, 0.0, 2.0, r)
                }
            }
            Scenario::S4 => truncnorm_sample(self.f_opt(x), 0.5, 0.0, 2.0, r),
        }
    }
}

/// One draw from N(mu, sigma^2) truncated to [lo, hi] by inversion: a
/// uniform on (Phi((lo-mu)/sigma), Phi((hi-mu)/sigma)) pushed through the
/// normal quantile. A numerically empty interval, or sigma <= 0, collapses
/// to the bound nearest mu; the flag reports the collapse.
pub fn truncnorm_sample(
    mu: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    r: &mut ChaCha8Rng,
) -> (f64, bool) {
    if !(sigma > 0.0) {
        return (mu.clamp(lo, hi), true);
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let p_lo = std.cdf((lo - mu) / sigma);
    let p_hi = std.cdf((hi - mu) / sigma);
    if !(p_hi - p_lo > 1e-14) {
        return (mu.clamp(lo, hi), true);
    }
    let u = rng::uniform(r, p_lo, p_hi);
    let x = mu + sigma * std.inverse_cdf(u);
    (x.clamp(lo, hi), false)
}

/// Whether squared copies of the continuous covariates are appended before
/// fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    Raw,
    Quadratic,
}

/// One benchmark cell: a scenario at one training size.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    /// Covariate count; None uses the scenario default.
    pub p: Option<usize>,
    pub noise_sd: f64,
    pub augment: Augment,
}

impl ScenarioSpec {
    /// The standard protocol: raw covariates for the first scenario,
    /// quadratic augmentation for the nonlinear ones, unit noise.
    pub fn new(scenario: Scenario, n: usize) -> Self {
        let augment = if scenario == Scenario::S1 { Augment::Raw } else { Augment::Quadratic };
        ScenarioSpec { scenario, n, p: None, noise_sd: 1.0, augment }
    }

    pub fn resolved_p(&self) -> usize {
        self.p.unwrap_or_else(|| self.scenario.default_p())
    }
}

/// A generated training or test set, with the optimal rule evaluated at the
/// drawn covariates.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub data: Dataset,
    pub f_opt: Array1<f64>,
    /// Count of dose draws that collapsed to a truncation bound.
    pub truncation_clamps: usize,
}

/// Generate one dataset. The stream is fully determined by (seed, tags);
/// the draw order is fixed as the covariate matrix row by row, then one
/// dose per row, then one noise term per row.
pub fn gen_scenario(
    spec: &ScenarioSpec,
    seed: u64,
    tags: [u64; 3],
) -> Result<GeneratedData, BenchError> {
    let p = spec.resolved_p();
    if p < spec.scenario.required_p() {
        return Err(BenchError::Data(format!(
            "scenario {} needs at least {} covariates, got {}",
            spec.scenario.id(),
            spec.scenario.required_p(),
            p
        )));
    }
    if spec.n < 2 {
        return Err(BenchError::Data("scenario size must be at least 2".into()));
    }
    if !(spec.noise_sd >= 0.0) {
        return Err(BenchError::Data("noise_sd must be non-negative".into()));
    }
    let mut r = rng::substream(seed, tags);
    let n = spec.n;
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            x[[i, j]] = rng::uniform(&mut r, -1.0, 1.0);
        }
    }
    let mut a = Array1::zeros(n);
    let mut clamps = 0usize;
    for i in 0..n {
        let (dose, clamped) = spec.scenario.sample_dose(x.row(i), &mut r);
        a[i] = dose;
        clamps += usize::from(clamped);
    }
    let f_opt = Array1::from_shape_fn(n, |i| spec.scenario.f_opt(x.row(i)));
    let y = Array1::from_shape_fn(n, |i| {
        spec.scenario.mean_response(x.row(i), a[i]) + spec.noise_sd * rng::standard_normal(&mut r)
    });
    let data = Dataset::new(y, a, x, None)?;
    Ok(GeneratedData { data, f_opt, truncation_clamps: clamps })
}

/// Append squared copies of every continuous column (more than two distinct
/// values); binary indicators pass through unchanged. Returns the augmented
/// matrix with the new column names.
pub fn augment_quadratic(x: ArrayView2<f64>, names: &[String]) -> (Array2<f64>, Vec<String>) {
    let mut continuous = Vec::new();
    for j in 0..x.ncols() {
        let mut seen: Vec<f64> = Vec::new();
        for v in x.column(j) {
            if !seen.iter().any(|s| s == v) {
                seen.push(*v);
                if seen.len() > 2 {
                    continuous.push(j);
                    break;
                }
            }
        }
    }
    let mut out = Array2::zeros((x.nrows(), x.ncols() + continuous.len()));
    out.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
    let mut out_names: Vec<String> = names.to_vec();
    for (k, j) in continuous.iter().enumerate() {
        let col = x.column(*j);
        out.column_mut(x.ncols() + k).assign(&col.mapv(|v| v * v));
        out_names.push(format!("{}_sq", names[*j]));
    }
    (out, out_names)
}

/// One successful replicate within a cell.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub value: f64,
    pub converged: bool,
    /// Wall-clock fit time; informational only, excluded from any
    /// determinism guarantee.
    pub fit_seconds: f64,
}

/// Aggregate over the replicates of one cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub scenario: u32,
    pub n: usize,
    pub mean_value: f64,
    pub sd_value: f64,
    pub replicates: usize,
    pub failures: usize,
    /// Successful replicates in replicate order.
    pub details: Vec<ReplicateResult>,
}

/// Run every cell: per replicate, generate a fresh training set, fit, apply
/// the estimated rule to the cell's shared test covariates, and score it
/// against the scenario truth. Replicate streams derive from
/// (seed, scenario, n, replicate), so results do not depend on the rayon
/// worker count. A cell where more than a quarter of the replicates fail
/// aborts the run.
pub fn run_benchmark(
    specs: &[ScenarioSpec],
    replicates: usize,
    seed: u64,
    test_size: usize,
    config: &SimslConfig,
) -> Result<Vec<CellResult>, BenchError> {
    if replicates == 0 {
        return Err(BenchError::Data("at least one replicate required".into()));
    }
    if test_size < 2 {
        return Err(BenchError::Data("test size must be at least 2".into()));
    }
    specs.iter().map(|s| run_cell(s, replicates, seed, test_size, config)).collect()
}

fn run_cell(
    spec: &ScenarioSpec,
    replicates: usize,
    seed: u64,
    test_size: usize,
    config: &SimslConfig,
) -> Result<CellResult, BenchError> {
    let sid = spec.scenario.id() as u64;
    let test_spec = ScenarioSpec { n: test_size, ..spec.clone() };
    let test = gen_scenario(&test_spec, seed, [sid ^ TEST_STREAM_XOR, spec.n as u64, 0])?;
    let (test_x, _) = match spec.augment {
        Augment::Raw => (test.data.x.clone(), test.data.x_names.clone()),
        Augment::Quadratic => augment_quadratic(test.data.x.view(), &test.data.x_names),
    };

    let outcomes: Vec<Result<ReplicateResult, BenchError>> = (0..replicates)
        .into_par_iter()
        .map(|rep| run_replicate(spec, seed, rep, &test, test_x.view(), config))
        .collect();

    let mut details = Vec::new();
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(r) => details.push(r),
            Err(_) => failures += 1,
        }
    }
    if failures * 4 > replicates {
        return Err(BenchError::TooManyFailures {
            scenario: spec.scenario.id(),
            n: spec.n,
            failed: failures,
            total: replicates,
        });
    }
    let values: Vec<f64> = details.iter().map(|r| r.value).collect();
    let m = values.len() as f64;
    let mean_value = values.iter().sum::<f64>() / m;
    let sd_value = if values.len() > 1 {
        (values.iter().map(|v| (v - mean_value) * (v - mean_value)).sum::<f64>() / (m - 1.0))
            .sqrt()
    } else {
        0.0
    };
    Ok(CellResult {
        scenario: spec.scenario.id(),
        n: spec.n,
        mean_value,
        sd_value,
        replicates,
        failures,
        details,
    })
}

fn run_replicate(
    spec: &ScenarioSpec,
    seed: u64,
    rep: usize,
    test: &GeneratedData,
    test_x: ArrayView2<f64>,
    config: &SimslConfig,
) -> Result<ReplicateResult, BenchError> {
    let sid = spec.scenario.id() as u64;
    let train = gen_scenario(spec, seed, [sid, spec.n as u64, rep as u64])?;
    let fit_data = match spec.augment {
        Augment::Raw => train.data,
        Augment::Quadratic => {
            let (x, names) = augment_quadratic(train.data.x.view(), &train.data.x_names);
            Dataset::new(train.data.y, train.data.a, x, Some(names))?
        }
    };
    let started = Instant::now();
    let model = fit_simsl(&fit_data, config)?;
    let fit_seconds = started.elapsed().as_secs_f64();
    let doses = doserule::optimal_dose(&model, test_x, None)?;
    let value =
        doserule::true_value_scenario(doses.view(), test.data.x.view(), spec.scenario.id())?;
    Ok(ReplicateResult { replicate: rep, value, converged: model.converged, fit_seconds })
}
