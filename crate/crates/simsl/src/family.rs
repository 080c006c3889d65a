//! Exponential families under their canonical links.
//!
//! Only what penalized IRLS needs: the inverse link, the cumulant, and its
//! second derivative (the IRLS weight). Dispersion is never estimated; the
//! gaussian family is fit as penalized least squares and the discrete
//! families at unit dispersion.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// Parse failure for a family name, listing the supported spellings.
#[derive(Debug, Clone, thiserror::Error)]
#[error("unknown family '{0}'; supported families: gaussian, bernoulli, poisson")]
pub struct UnknownFamily(pub String);

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        }
    }

    /// Inverse canonical link: identity, logistic, or exp.
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Bernoulli => {
                // Split on the sign so neither branch exponentiates a large
                // positive argument.
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Family::Poisson => eta.exp(),
        }
    }

    /// Cumulant b(eta), with b' equal to the inverse link.
    pub fn cumulant(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * eta * eta,
            Family::Bernoulli => {
                // log(1 + e^eta), computed on the stable side.
                if eta > 0.0 {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                }
            }
            Family::Poisson => eta.exp(),
        }
    }

    /// IRLS weight b''(eta): the variance function at the canonical link.
    pub fn irls_weight(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => {
                let mu = self.inverse_link(eta);
                mu * (1.0 - mu)
            }
            Family::Poisson => eta.exp(),
        }
    }

    /// Whether a single response value is inside the family's support.
    pub fn response_ok(self, y: f64) -> bool {
        match self {
            Family::Gaussian => y.is_finite(),
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y.is_finite() && y >= 0.0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = UnknownFamily;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "bernoulli" => Ok(Family::Bernoulli),
            "poisson" => Ok(Family::Poisson),
            other => Err(UnknownFamily(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn inverse_links_hit_known_values() {
        assert_eq!(Family::Gaussian.inverse_link(1.25), 1.25);
        assert_abs_diff_eq!(Family::Bernoulli.inverse_link(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(Family::Poisson.inverse_link(1.0), std::f64::consts::E, epsilon = 1e-12);
    }

    #[test]
    fn logistic_is_stable_in_the_tails() {
        let lo = Family::Bernoulli.inverse_link(-800.0);
        let hi = Family::Bernoulli.inverse_link(800.0);
        assert!(lo >= 0.0 && lo < 1e-300);
        assert_eq!(hi, 1.0);
        assert!(Family::Bernoulli.cumulant(800.0).is_finite());
    }

    #[test]
    fn cumulant_derivative_matches_inverse_link() {
        // Central differences of b should reproduce b' = h^{-1}.
        let h = 1e-6;
        for family in [Family::Gaussian, Family::Bernoulli, Family::Poisson] {
            for &eta in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
                let fd = (family.cumulant(eta + h) - family.cumulant(eta - h)) / (2.0 * h);
                assert_abs_diff_eq!(fd, family.inverse_link(eta), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn response_support_checks() {
        assert!(Family::Bernoulli.response_ok(1.0));
        assert!(!Family::Bernoulli.response_ok(0.5));
        assert!(Family::Poisson.response_ok(3.0));
        assert!(!Family::Poisson.response_ok(-1.0));
        assert!(!Family::Gaussian.response_ok(f64::NAN));
    }

    #[test]
    fn family_names_round_trip() {
        for family in [Family::Gaussian, Family::Bernoulli, Family::Poisson] {
            assert_eq!(family.name().parse::<Family>().unwrap(), family);
        }
        let err = "binomial".parse::<Family>().unwrap_err();
        assert!(err.to_string().contains("gaussian, bernoulli, poisson"));
    }
}
