//! Mean functions for the quasi-likelihood model `E(y | x) = psi(beta' x)`.
//!
//! Every family has a strictly positive derivative, which is all the
//! estimating equation needs. Poisson regression and log-link Gamma
//! regression share the [`LinkFamily::Exp`] mean, since the estimating
//! equation never looks at the variance function.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest linear predictor passed to `exp`; larger values are clamped and flagged.
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFamily {
    /// `psi(t) = t`: linear regression.
    Identity,
    /// `psi(t) = e^t`: Poisson and log-link Gamma regression.
    Exp,
    /// `psi(t) = 1 / (1 + e^-t)`: logistic regression.
    Logistic,
}

/// `psi` and its derivative at one linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEval {
    pub mean: f64,
    pub derivative: f64,
    /// The predictor exceeded [`EXP_CLAMP`] and was clamped before exponentiation.
    pub saturated: bool,
}

impl LinkFamily {
    pub fn name(self) -> &'static str {
        match self {
            LinkFamily::Identity => "identity",
            LinkFamily::Exp => "exp",
            LinkFamily::Logistic => "logistic",
        }
    }

    pub fn mean(self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(Error::Domain(eta));
        }
        Ok(self.eval(eta).mean)
    }

    pub fn mean_derivative(self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(Error::Domain(eta));
        }
        Ok(self.eval(eta).derivative)
    }

    /// Unchecked evaluation of `psi` and `psi'`; callers guarantee a finite `eta`.
    #[inline]
    pub fn eval(self, eta: f64) -> MeanEval {
        match self {
            LinkFamily::Identity => MeanEval {
                mean: eta,
                derivative: 1.0,
                saturated: false,
            },
            LinkFamily::Exp => {
                let saturated = eta > EXP_CLAMP;
                let m = eta.min(EXP_CLAMP).exp();
                MeanEval {
                    mean: m,
                    derivative: m,
                    saturated,
                }
            }
            LinkFamily::Logistic => {
                let m = sigmoid(eta);
                // psi' = psi (1 - psi); for large |eta| use e^{-|eta|} / (1 + e^{-|eta|})^2
                // so the derivative stays positive instead of rounding to zero.
                let e = (-eta.abs()).exp();
                let d = e / ((1.0 + e) * (1.0 + e));
                MeanEval {
                    mean: m,
                    derivative: d,
                    saturated: false,
                }
            }
        }
    }

    #[inline]
    pub fn mean_unchecked(self, eta: f64) -> f64 {
        match self {
            LinkFamily::Identity => eta,
            LinkFamily::Exp => eta.min(EXP_CLAMP).exp(),
            LinkFamily::Logistic => sigmoid(eta),
        }
    }
}

#[inline]
fn sigmoid(eta: f64) -> f64 {
    if eta < 0.0 {
        let e = eta.exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + (-eta).exp())
    }
}

impl fmt::Display for LinkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(LinkFamily::Identity),
            "exp" | "poisson" | "log" => Ok(LinkFamily::Exp),
            "logistic" | "logit" => Ok(LinkFamily::Logistic),
            other => Err(Error::Config(format!(
                "unknown family {other:?} (expected identity, exp or logistic)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const ALL: [LinkFamily; 3] = [LinkFamily::Identity, LinkFamily::Exp, LinkFamily::Logistic];

    #[test]
    fn mean_examples() {
        assert_eq!(LinkFamily::Exp.mean(0.0).unwrap(), 1.0);
        assert_eq!(LinkFamily::Identity.mean(3.5).unwrap(), 3.5);
        assert_eq!(LinkFamily::Logistic.mean(0.0).unwrap(), 0.5);
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(LinkFamily::Identity.mean_derivative(-7.2).unwrap(), 1.0);
        assert_abs_diff_eq!(
            LinkFamily::Exp.mean_derivative(1.0).unwrap(),
            std::f64::consts::E,
            epsilon = 1e-12
        );
        assert_eq!(LinkFamily::Logistic.mean_derivative(0.0).unwrap(), 0.25);
    }

    #[test]
    fn non_finite_predictor_is_a_domain_error() {
        for fam in ALL {
            assert!(matches!(fam.mean(f64::NAN), Err(Error::Domain(_))));
            assert!(matches!(
                fam.mean_derivative(f64::INFINITY),
                Err(Error::Domain(_))
            ));
        }
    }

    #[test]
    fn finite_differences_match_derivative() {
        let h = 1e-5;
        for fam in ALL {
            for i in 0..=200 {
                let eta = -10.0 + 0.1 * i as f64;
                let fd = (fam.mean(eta + h).unwrap() - fam.mean(eta - h).unwrap()) / (2.0 * h);
                let d = fam.mean_derivative(eta).unwrap();
                assert!((fd - d).abs() <= 1e-6, "{fam} at {eta}: fd={fd} d={d}");
            }
        }
    }

    #[test]
    fn exp_clamps_and_flags() {
        let e = LinkFamily::Exp.eval(1e4);
        assert!(e.saturated);
        assert!(e.mean.is_finite());
        assert!(!LinkFamily::Exp.eval(10.0).saturated);
    }

    #[test]
    fn logistic_is_stable_in_the_tails() {
        let lo = LinkFamily::Logistic.eval(-800.0);
        let hi = LinkFamily::Logistic.eval(800.0);
        assert!(lo.mean >= 0.0 && lo.mean.is_finite());
        assert!(hi.mean <= 1.0 && hi.mean.is_finite());
        assert!(LinkFamily::Logistic.eval(-30.0).derivative > 0.0);
    }

    #[test]
    fn parse_names() {
        assert_eq!("exp".parse::<LinkFamily>().unwrap(), LinkFamily::Exp);
        assert_eq!(
            "Identity".parse::<LinkFamily>().unwrap(),
            LinkFamily::Identity
        );
        assert!("probit".parse::<LinkFamily>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn derivative_positive_and_ranges(eta in -700.0f64..700.0) {
            for fam in ALL {
                let e = fam.eval(eta);
                proptest::prop_assert!(e.derivative > 0.0);
            }
            let l = LinkFamily::Logistic.mean(eta).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&l));
            proptest::prop_assert!(LinkFamily::Exp.mean(eta).unwrap() > 0.0);
        }
    }
}
