//! Heterogeneity fields multiplying a base energy.

use serde::{Deserialize, Serialize};

use super::{IntegrandError, MaterialPoint};
use crate::expr::Expr;

/// A positive scalar field `a(x_α, x₃)`.
///
/// Jump surfaces of the piecewise-constant variants are closed-form
/// (thresholds, parity cells), so quadrature points never need interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[serde(deny_unknown_fields)]
pub enum Modulation {
    Constant {
        value: f64,
    },
    /// Layers in `x₃`: `values[k]` applies where exactly `k` thresholds are `<= x₃`.
    Laminate {
        thresholds: Vec<f64>,
        values: Vec<f64>,
    },
    /// Alternating values on the cells of an in-plane lattice.
    Checkerboard {
        period: [f64; 2],
        #[serde(default)]
        origin: [f64; 2],
        values: [f64; 2],
    },
    /// `mean + amplitude · cos(2π k·x)`.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        wavevector: [f64; 3],
    },
    Product {
        factors: Vec<Modulation>,
    },
    /// A closed-form expression with declared bounds, checked at evaluation.
    Expression {
        expr: Expr,
        min: f64,
        max: f64,
    },
}

impl Default for Modulation {
    fn default() -> Self {
        Modulation::Constant { value: 1.0 }
    }
}

impl Modulation {
    pub fn uniform() -> Self {
        Self::default()
    }

    /// Two layers split at `x₃ = 0`.
    pub fn two_layer(lower: f64, upper: f64) -> Self {
        Modulation::Laminate {
            thresholds: vec![0.0],
            values: vec![lower, upper],
        }
    }

    pub fn checkerboard(period: f64, a: f64, b: f64) -> Self {
        Modulation::Checkerboard {
            period: [period, period],
            origin: [0.0, 0.0],
            values: [a, b],
        }
    }

    pub fn validate(&self) -> Result<(), IntegrandError> {
        let bad = |msg: String| Err(IntegrandError::InvalidParameter(msg));
        match self {
            Modulation::Constant { value } => {
                if !(value.is_finite() && *value > 0.0) {
                    return bad(format!("constant modulation must be positive, got {value}"));
                }
            }
            Modulation::Laminate { thresholds, values } => {
                if values.len() != thresholds.len() + 1 {
                    return bad("laminate needs one more value than thresholds".into());
                }
                if thresholds.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("laminate thresholds must be strictly increasing".into());
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("laminate values must be positive".into());
                }
            }
            Modulation::Checkerboard { period, values, .. } => {
                if period.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                    return bad("checkerboard period must be positive".into());
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad("checkerboard values must be positive".into());
                }
            }
            Modulation::Sinusoid {
                mean, amplitude, ..
            } => {
                if !(mean.is_finite() && amplitude.is_finite() && mean - amplitude.abs() > 0.0) {
                    return bad("sinusoid must stay positive: mean > |amplitude|".into());
                }
            }
            Modulation::Product { factors } => {
                for f in factors {
                    f.validate()?;
                }
            }
            Modulation::Expression { min, max, .. } => {
                if !(min.is_finite() && max.is_finite() && *min > 0.0 && min <= max) {
                    return bad("expression bounds must satisfy 0 < min <= max".into());
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &MaterialPoint) -> Result<f64, IntegrandError> {
        Ok(match self {
            Modulation::Constant { value } => *value,
            Modulation::Laminate { thresholds, values } => {
                let k = thresholds.iter().filter(|t| x.x3 >= **t).count();
                values[k]
            }
            Modulation::Checkerboard {
                period,
                origin,
                values,
            } => {
                let i = ((x.x_alpha[0] - origin[0]) / period[0]).floor() as i64;
                let j = ((x.x_alpha[1] - origin[1]) / period[1]).floor() as i64;
                values[(i + j).rem_euclid(2) as usize]
            }
            Modulation::Sinusoid {
                mean,
                amplitude,
                wavevector: k,
            } => {
                let phase = k[0] * x.x_alpha[0] + k[1] * x.x_alpha[1] + k[2] * x.x3;
                mean + amplitude * (2.0 * std::f64::consts::PI * phase).cos()
            }
            Modulation::Product { factors } => {
                let mut v = 1.0;
                for f in factors {
                    v *= f.value(x)?;
                }
                v
            }
            Modulation::Expression { expr, min, max } => {
                let v = expr.eval([x.x_alpha[0], x.x_alpha[1], x.x3]);
                if !(v >= *min && v <= *max) {
                    return Err(IntegrandError::ModulationOutOfBounds {
                        value: v,
                        min: *min,
                        max: *max,
                    });
                }
                v
            }
        })
    }

    /// Lower and upper bounds of the field over the whole domain.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Modulation::Constant { value } => (*value, *value),
            Modulation::Laminate { values, .. } => min_max(values),
            Modulation::Checkerboard { values, .. } => min_max(values),
            Modulation::Sinusoid {
                mean, amplitude, ..
            } => (mean - amplitude.abs(), mean + amplitude.abs()),
            Modulation::Product { factors } => factors.iter().fold((1.0, 1.0), |(lo, hi), f| {
                let (a, b) = f.bounds();
                (lo * a, hi * b)
            }),
            Modulation::Expression { min, max, .. } => (*min, *max),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Modulation::Constant { .. } => true,
            Modulation::Product { factors } => factors.iter().all(Modulation::is_constant),
            Modulation::Expression { expr, .. } => expr.is_constant(),
            _ => false,
        }
    }

    /// False when the field is a function of `x₃` alone.
    pub fn depends_on_x_alpha(&self) -> bool {
        match self {
            Modulation::Constant { .. } | Modulation::Laminate { .. } => false,
            Modulation::Checkerboard { .. } => true,
            Modulation::Sinusoid { wavevector, .. } => wavevector[0] != 0.0 || wavevector[1] != 0.0,
            Modulation::Product { factors } => factors.iter().any(Modulation::depends_on_x_alpha),
            Modulation::Expression { expr, .. } => !expr.is_constant(),
        }
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(*x), hi.max(*x))
    })
}
