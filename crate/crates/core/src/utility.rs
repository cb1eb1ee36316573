//! Utility functions and the coefficient processes built from them.
//!
//! For wealth `x`, `F_k(x) = U^(k)(x) x^k` for `k = 1, 2, 3`. The optimal
//! control and its BSDE are written in terms of
//! `zeta = -F1/F2` (inverse relative risk aversion), `phi = F3/F2`,
//! `A = 1/zeta - 1` and `B = 1 + zeta phi / 2`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub type DerivativeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("utility: wealth {x} is outside the domain of {kind} utility")]
    Domain { kind: &'static str, x: f64 },
    #[error("utility: {0}")]
    InvalidParameter(String),
    #[error("utility: F2 vanishes at x={x}; zeta and phi are undefined")]
    DegenerateCurvature { x: f64 },
    #[error("utility: non-finite derivative at x={x}")]
    NonFinite { x: f64 },
}

/// A utility supplied by the caller with analytic derivatives.
#[derive(Clone)]
pub struct CustomUtility {
    pub value: DerivativeFn,
    pub d1: DerivativeFn,
    pub d2: DerivativeFn,
    pub d3: DerivativeFn,
    /// Open lower end of the domain; `None` means all reals.
    pub lower_bound: Option<f64>,
}

impl fmt::Debug for CustomUtility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomUtility").field("lower_bound", &self.lower_bound).finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub enum UtilitySpec {
    Log,
    /// `x^eta / eta` with `eta < 1`, `eta != 0`.
    Power { eta: f64 },
    /// `-exp(-gamma x)` with `gamma > 0`.
    Exponential { gamma: f64 },
    Custom(CustomUtility),
}

/// `(U, U', U'', U''')` at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtilityDerivatives {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoefficientBundle {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub zeta: f64,
    pub phi: f64,
    pub a: f64,
    pub b: f64,
}

impl UtilitySpec {
    pub fn power(eta: f64) -> Result<Self, UtilityError> {
        if !eta.is_finite() || eta >= 1.0 {
            return Err(UtilityError::InvalidParameter("power utility requires eta < 1".into()));
        }
        if eta == 0.0 {
            return Err(UtilityError::InvalidParameter("power utility requires eta != 0 (use log utility)".into()));
        }
        Ok(Self::Power { eta })
    }

    pub fn exponential(gamma: f64) -> Result<Self, UtilityError> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(UtilityError::InvalidParameter("exponential utility requires gamma > 0".into()));
        }
        Ok(Self::Exponential { gamma })
    }

    /// Custom utility, spot-checked for `U' > 0` and `U'' < 0` on `sample`.
    pub fn custom(utility: CustomUtility, sample: &[f64]) -> Result<Self, UtilityError> {
        for &x in sample {
            let d1 = (utility.d1)(x);
            let d2 = (utility.d2)(x);
            if !(d1.is_finite() && d2.is_finite()) {
                return Err(UtilityError::NonFinite { x });
            }
            if d1 <= 0.0 || d2 >= 0.0 {
                return Err(UtilityError::InvalidParameter(format!(
                    "custom utility must be increasing and strictly concave; U'={d1}, U''={d2} at x={x}"
                )));
            }
        }
        Ok(Self::Custom(utility))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Log => "log",
            Self::Power { .. } => "power",
            Self::Exponential { .. } => "exponential",
            Self::Custom(_) => "custom",
        }
    }

    pub fn in_domain(&self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        match self {
            Self::Log | Self::Power { .. } => x > 0.0,
            Self::Exponential { .. } => true,
            Self::Custom(c) => c.lower_bound.is_none_or(|lb| x > lb),
        }
    }

    /// True when `F2/F1` and `F3/F1` do not depend on wealth (log and power).
    pub fn is_scale_free(&self) -> bool {
        matches!(self, Self::Log | Self::Power { .. })
    }

    /// `U(x)` only.
    #[inline]
    pub fn value(&self, x: f64) -> Result<f64, UtilityError> {
        if !self.in_domain(x) {
            return Err(UtilityError::Domain { kind: self.kind(), x });
        }
        Ok(match self {
            Self::Log => x.ln(),
            Self::Power { eta } => x.powf(*eta) / eta,
            Self::Exponential { gamma } => -(-gamma * x).exp(),
            Self::Custom(c) => (c.value)(x),
        })
    }

    pub fn evaluate(&self, x: f64) -> Result<UtilityDerivatives, UtilityError> {
        if !self.in_domain(x) {
            return Err(UtilityError::Domain { kind: self.kind(), x });
        }
        let d = match self {
            Self::Log => {
                let inv = 1.0 / x;
                UtilityDerivatives {
                    value: x.ln(),
                    d1: inv,
                    d2: -inv * inv,
                    d3: 2.0 * inv * inv * inv,
                }
            }
            Self::Power { eta } => {
                let eta = *eta;
                let xe = x.powf(eta);
                UtilityDerivatives {
                    value: xe / eta,
                    d1: xe / x,
                    d2: (eta - 1.0) * xe / (x * x),
                    d3: (eta - 1.0) * (eta - 2.0) * xe / (x * x * x),
                }
            }
            Self::Exponential { gamma } => {
                let e = (-gamma * x).exp();
                UtilityDerivatives {
                    value: -e,
                    d1: gamma * e,
                    d2: -gamma * gamma * e,
                    d3: gamma * gamma * gamma * e,
                }
            }
            Self::Custom(c) => UtilityDerivatives {
                value: (c.value)(x),
                d1: (c.d1)(x),
                d2: (c.d2)(x),
                d3: (c.d3)(x),
            },
        };
        if !(d.value.is_finite() && d.d1.is_finite() && d.d2.is_finite() && d.d3.is_finite()) {
            return Err(UtilityError::NonFinite { x });
        }
        Ok(d)
    }

    /// `F_k = U^(k)(x) x^k` and the derived `zeta, phi, A, B`.
    pub fn coefficient_bundle(&self, x: f64) -> Result<CoefficientBundle, UtilityError> {
        let d = self.evaluate(x)?;
        let f1 = d.d1 * x;
        let f2 = d.d2 * x * x;
        let f3 = d.d3 * x * x * x;
        if f2 == 0.0 {
            return Err(UtilityError::DegenerateCurvature { x });
        }
        let zeta = -f1 / f2;
        let phi = f3 / f2;
        Ok(CoefficientBundle {
            f1,
            f2,
            f3,
            zeta,
            phi,
            a: 1.0 / zeta - 1.0,
            b: 1.0 + 0.5 * zeta * phi,
        })
    }

    /// Arrow-Pratt relative risk aversion `-x U''(x) / U'(x)`.
    pub fn relative_risk_aversion(&self, x: f64) -> Result<f64, UtilityError> {
        let d = self.evaluate(x)?;
        Ok(-x * d.d2 / d.d1)
    }
}
