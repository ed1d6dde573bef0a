use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Pointwise activation used for the score nonlinearity and the
/// aggregation nonlinearity of an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu { slope: f64 },
    Elu { alpha: f64 },
    Exp,
}

impl Activation {
    pub fn leaky_relu(slope: f64) -> Self {
        Activation::LeakyRelu { slope }
    }

    pub fn elu(alpha: f64) -> Self {
        Activation::Elu { alpha }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu { slope } if !(slope.is_finite() && slope > 0.0) => {
                invalid(format!("leaky_relu slope must be finite and positive, got {slope}"))
            }
            Activation::Elu { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                invalid(format!("elu alpha must be finite and positive, got {alpha}"))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Elu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative at `x`. At the kink of leaky-relu the right derivative is used.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Elu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha * x.exp()
                }
            }
            Activation::Exp => x.exp(),
        }
    }

    /// Global Lipschitz constant, or `None` when unbounded (`exp`).
    pub fn lipschitz(&self) -> Option<f64> {
        match *self {
            Activation::Identity => Some(1.0),
            Activation::LeakyRelu { slope } => Some(slope.max(1.0)),
            Activation::Elu { alpha } => Some(alpha.max(1.0)),
            Activation::Exp => None,
        }
    }

    pub fn is_monotone(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let f = Activation::leaky_relu(0.2);
        assert_eq!(f.apply(0.0), 0.0);
        assert_eq!(f.apply(-1.0), -0.2);
        assert_eq!(f.apply(1.5), 1.5);
        assert_eq!(f.lipschitz(), Some(1.0));
    }

    #[test]
    fn elu_at_minus_one() {
        let f = Activation::elu(1.0);
        let expected = (-1.0f64).exp() - 1.0;
        assert!((f.apply(-1.0) - expected).abs() < 1e-15);
        assert!((f.apply(-1.0) + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Activation::leaky_relu(-0.1).validate().is_err());
        assert!(Activation::elu(f64::NAN).validate().is_err());
        assert!(Activation::elu(1.0).validate().is_ok());
    }

    #[test]
    fn derivatives_match_differences() {
        for act in [Activation::leaky_relu(0.2), Activation::elu(1.0), Activation::Exp, Activation::Identity] {
            for &x in &[-1.3, -0.2, 0.4, 2.0] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-7, "{act:?} at {x}");
            }
        }
    }
}
