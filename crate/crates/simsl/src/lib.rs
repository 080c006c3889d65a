//! Single-index models with a two-dimensional surface link.
//!
//! The model is `E[Y | X, A] = mu(X) + g(beta'X, A)`: a vector of covariates
//! `X` enters through one linear index `u = beta'X`, and the index interacts
//! with a treatment dose `A` through an unspecified smooth surface `g`.
//! The surface carries the dose-by-covariate interaction that matters for
//! individualized dosing, while the covariate main effect `mu` is left
//! unmodeled and removed from the estimation problem by a sum-to-zero
//! constraint on the dose axis.
//!
//! The crate fits the model by alternating penalized tensor-product P-spline
//! estimation of `g` with linearized least-squares updates of `beta`
//! ([`model::fit_simsl`]), turns a fitted model into a dose rule by
//! maximizing the surface over a dose grid ([`doserule::optimal_dose`]),
//! and ships a deterministic simulation benchmark ([`simbench`]) that
//! measures the value of estimated rules on synthetic scenarios.

pub mod basis;
pub mod doserule;
mod error;
pub mod family;
pub mod io;
mod linalg;
pub mod model;
pub mod penreg;
pub mod rng;
pub mod simbench;

pub use error::{Error, ErrorKind};
pub use family::Family;
pub use model::{fit_simsl, Dataset, SimslConfig, SimslModel};
