//! One error type covering everything the crate can fail with, plus the
//! coarse split consumers need for exit codes.

use thiserror::Error;

use crate::basis::BasisError;
use crate::doserule::DoseError;
use crate::io::IoError;
use crate::model::ModelError;
use crate::penreg::FitError;
use crate::simbench::BenchError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dose(#[from] DoseError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Whether a failure traces back to the caller's inputs or to the numerics
/// of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    User,
    Numerical,
}

impl Error {
    /// Short name of the module the failure came from, for diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Basis(_) => "basis",
            Error::Fit(_) => "penreg",
            Error::Model(_) => "model",
            Error::Dose(_) => "doserule",
            Error::Bench(_) => "simbench",
            Error::Io(_) => "io",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        let user = match self {
            Error::Basis(e) => e.is_user(),
            Error::Fit(_) => false,
            Error::Model(e) => e.is_user(),
            Error::Dose(e) => e.is_user(),
            Error::Bench(e) => e.is_user(),
            Error::Io(e) => e.is_user(),
        };
        if user {
            ErrorKind::User
        } else {
            ErrorKind::Numerical
        }
    }
}
