//! Heterogeneous stored-energy densities `W(x; F) = a(x) w(F)`.

mod family;
mod modulation;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::descent::{lbfgs, DescentSettings};

pub use family::{from_rows, rank_one_factor, to_rows, BaseEnergy, Rows3};
pub use modulation::Modulation;

pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat3x2 = nalgebra::Matrix3x2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;

/// `(F̄ | z)`: `F̄` as the first two columns, `z` as the third.
pub fn join(f_bar: &Mat3x2, z: &Vec3) -> Mat3 {
    Mat3::from_columns(&[f_bar.column(0).into_owned(), f_bar.column(1).into_owned(), *z])
}

pub fn split(f: &Mat3) -> (Mat3x2, Vec3) {
    (f.fixed_columns::<2>(0).into_owned(), f.column(2).into_owned())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrandError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("point ({x1}, {x2}, {x3}) lies outside the domain")]
    OutsideDomain { x1: f64, x2: f64, x3: f64 },
    #[error("modulation value {value} outside declared bounds [{min}, {max}]")]
    ModulationOutOfBounds { value: f64, min: f64, max: f64 },
    #[error("energy is not finite")]
    NonFinite,
    #[error("fiber infimum did not converge (best value {best_value})")]
    FiberNotConverged { best_value: f64, best_z: [f64; 3] },
}

/// An in-plane point and a rescaled transverse coordinate in `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialPoint {
    pub x_alpha: [f64; 2],
    pub x3: f64,
}

impl MaterialPoint {
    pub fn new(x_alpha: [f64; 2], x3: f64) -> Self {
        Self { x_alpha, x3 }
    }

    pub fn with_x3(self, x3: f64) -> Self {
        Self { x3, ..self }
    }
}

/// An axis-aligned rectangle `[min, max]` in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([0.0, 0.0], [1.0, 1.0])
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.min.iter().chain(&self.max).all(|v| v.is_finite())
            && self.width() > 0.0
            && self.height() > 0.0
    }

    pub fn contains(&self, p: [f64; 2], slack: f64) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] - slack && p[i] <= self.max[i] + slack)
    }
}

/// `β′|F|^p − γ ≤ W(x; F) ≤ β(|F|^p + 1)`.
///
/// The offset `γ` lets energies with zeros away from the origin (shifted
/// quadratics, multi-well) carry honest coercivity constants; it is zero for
/// the plain p-norm family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSpec {
    pub p: f64,
    pub beta_lower: f64,
    pub beta_upper: f64,
    #[serde(default)]
    pub lower_offset: f64,
}

impl GrowthSpec {
    pub fn new(p: f64, beta_lower: f64, beta_upper: f64) -> Self {
        Self {
            p,
            beta_lower,
            beta_upper,
            lower_offset: 0.0,
        }
    }

    pub fn with_offset(self, lower_offset: f64) -> Self {
        Self {
            lower_offset,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), IntegrandError> {
        let ok = self.p.is_finite()
            && self.p > 1.0
            && self.beta_lower > 0.0
            && self.beta_lower <= self.beta_upper
            && self.beta_upper.is_finite()
            && self.lower_offset >= 0.0
            && self.lower_offset.is_finite();
        if ok {
            Ok(())
        } else {
            Err(IntegrandError::InvalidParameter(format!(
                "growth constants must satisfy 1 < p, 0 < beta_lower <= beta_upper, offset >= 0 (got {self:?})"
            )))
        }
    }

    pub fn lower(&self, norm: f64) -> f64 {
        self.beta_lower * norm.powf(self.p) - self.lower_offset
    }

    pub fn upper(&self, norm: f64) -> f64 {
        self.beta_upper * (norm.powf(self.p) + 1.0)
    }

    /// Bounds for a two-dimensional effective density at `(F̄ | z)`, written in
    /// terms of `|F̄|^p + |z|^p`.
    ///
    /// `(|F̄|² + |z|²)^{p/2}` lies between `c (|F̄|^p + |z|^p)` with
    /// `c = min(1, 2^{p/2−1})` and `C (|F̄|^p + |z|^p)` with `C = max(1, 2^{p/2−1})`.
    pub fn effective_bounds(&self, f_bar_norm: f64, z_norm: f64) -> (f64, f64) {
        let s = f_bar_norm.powf(self.p) + z_norm.powf(self.p);
        let k = 2f64.powf(0.5 * self.p - 1.0);
        (
            self.beta_lower * k.min(1.0) * s - self.lower_offset,
            self.beta_upper * (k.max(1.0) * s + 1.0),
        )
    }

    /// Radius containing every minimizer of `z ↦ W(F̄ | z)`.
    pub fn fiber_radius(&self, f_bar_norm: f64) -> f64 {
        ((self.upper(f_bar_norm) + self.lower_offset) / self.beta_lower).powf(1.0 / self.p)
    }
}

/// Pointwise energy and stress at a fixed material point.
pub trait PointEnergy: Sync {
    fn energy(&self, f: &Mat3) -> Result<f64, IntegrandError>;
    fn energy_stress(&self, f: &Mat3) -> Result<(f64, Mat3), IntegrandError>;
}

impl PointEnergy for BaseEnergy {
    fn energy(&self, f: &Mat3) -> Result<f64, IntegrandError> {
        Ok(BaseEnergy::energy(self, f))
    }

    fn energy_stress(&self, f: &Mat3) -> Result<(f64, Mat3), IntegrandError> {
        Ok(BaseEnergy::energy_stress(self, f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    PNorm,
    AnisotropicQuadratic,
    TwoWell,
    Composite,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDensity {
    base: BaseEnergy,
    #[serde(default)]
    modulation: Modulation,
    #[serde(default)]
    growth: Option<GrowthSpec>,
    #[serde(default)]
    omega: Option<Rect>,
}

/// A validated stored energy `W(x; F) = a(x) w(F)` with growth metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDensity")]
pub struct StoredEnergyDensity {
    base: BaseEnergy,
    modulation: Modulation,
    growth: GrowthSpec,
    omega: Option<Rect>,
}

impl TryFrom<RawDensity> for StoredEnergyDensity {
    type Error = IntegrandError;

    fn try_from(raw: RawDensity) -> Result<Self, Self::Error> {
        StoredEnergyDensity::from_parts(raw.base, raw.modulation, raw.growth, raw.omega)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FiberInfimum {
    pub value: f64,
    pub z: Vec3,
    pub starts: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthViolation {
    pub x: MaterialPoint,
    pub f: Rows3,
    pub value: f64,
    pub bound: f64,
    pub side: BoundSide,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub samples: usize,
    pub violation_count: usize,
    /// The first violations found, at most [`GrowthReport::MAX_LISTED`].
    pub violations: Vec<GrowthViolation>,
}

impl GrowthReport {
    pub const MAX_LISTED: usize = 1000;

    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

impl StoredEnergyDensity {
    /// Validates the parts; `growth = None` derives constants from the family
    /// and the modulation bounds.
    pub fn from_parts(
        base: BaseEnergy,
        modulation: Modulation,
        growth: Option<GrowthSpec>,
        omega: Option<Rect>,
    ) -> Result<Self, IntegrandError> {
        base.validate()?;
        modulation.validate()?;
        if let Some(r) = &omega {
            if !r.is_valid() {
                return Err(IntegrandError::InvalidParameter(
                    "omega must be a non-degenerate rectangle".into(),
                ));
            }
        }
        let growth = match growth {
            Some(g) => g,
            None => {
                let g = base.derived_growth();
                let (lo, hi) = modulation.bounds();
                GrowthSpec {
                    p: g.p,
                    beta_lower: g.beta_lower * lo,
                    beta_upper: g.beta_upper * hi,
                    lower_offset: g.lower_offset * hi,
                }
            }
        };
        growth.validate()?;
        Ok(Self {
            base,
            modulation,
            growth,
            omega,
        })
    }

    pub fn new(base: BaseEnergy) -> Result<Self, IntegrandError> {
        Self::from_parts(base, Modulation::default(), None, None)
    }

    /// `μ |F|^p`.
    pub fn p_norm(p: f64, modulus: f64) -> Result<Self, IntegrandError> {
        Self::new(BaseEnergy::PNorm { p, modulus })
    }

    /// `|F|²`.
    pub fn squared_norm() -> Self {
        Self::p_norm(2.0, 1.0).expect("valid constants")
    }

    /// `|F − A|²`.
    pub fn shifted_quadratic(center: &Mat3) -> Result<Self, IntegrandError> {
        Self::new(BaseEnergy::shifted_quadratic(center))
    }

    pub fn anisotropic_quadratic(
        stiffness: [[f64; 9]; 9],
        center: &Mat3,
    ) -> Result<Self, IntegrandError> {
        Self::new(BaseEnergy::AnisotropicQuadratic {
            stiffness,
            center: to_rows(center),
        })
    }

    /// `μ min_i |F − A_i|²`.
    pub fn two_well(wells: &[Mat3], modulus: f64) -> Result<Self, IntegrandError> {
        Self::new(BaseEnergy::TwoWell {
            wells: wells.iter().map(to_rows).collect(),
            modulus,
        })
    }

    /// Replaces the modulation; growth constants are re-derived.
    pub fn with_modulation(self, modulation: Modulation) -> Result<Self, IntegrandError> {
        Self::from_parts(self.base, modulation, None, self.omega)
    }

    /// Overrides the growth metadata (not re-verified; see [`Self::verify_growth`]).
    pub fn with_growth(self, growth: GrowthSpec) -> Result<Self, IntegrandError> {
        Self::from_parts(self.base, self.modulation, Some(growth), self.omega)
    }

    pub fn with_omega(self, omega: Rect) -> Result<Self, IntegrandError> {
        Self::from_parts(self.base, self.modulation, Some(self.growth), Some(omega))
    }

    pub fn base(&self) -> &BaseEnergy {
        &self.base
    }

    pub fn modulation(&self) -> &Modulation {
        &self.modulation
    }

    pub fn growth(&self) -> &GrowthSpec {
        &self.growth
    }

    pub fn omega(&self) -> Option<&Rect> {
        self.omega.as_ref()
    }

    pub fn family(&self) -> Family {
        if !self.modulation.is_constant() {
            return Family::Composite;
        }
        match self.base {
            BaseEnergy::PNorm { .. } => Family::PNorm,
            BaseEnergy::AnisotropicQuadratic { .. } => Family::AnisotropicQuadratic,
            BaseEnergy::TwoWell { .. } => Family::TwoWell,
        }
    }

    pub fn is_convex(&self) -> bool {
        self.base.is_convex()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn check_point(&self, x: &MaterialPoint) -> Result<(), IntegrandError> {
        let slack = 1e-12;
        let in_plane = self.omega.map_or(true, |r| r.contains(x.x_alpha, slack));
        if !(x.x3.abs() <= 1.0 + slack && in_plane && x.x_alpha.iter().all(|v| v.is_finite())) {
            return Err(IntegrandError::OutsideDomain {
                x1: x.x_alpha[0],
                x2: x.x_alpha[1],
                x3: x.x3,
            });
        }
        Ok(())
    }

    /// The modulation value `a(x)`, after a domain check.
    pub fn coefficient(&self, x: &MaterialPoint) -> Result<f64, IntegrandError> {
        self.check_point(x)?;
        self.modulation.value(x)
    }

    pub fn evaluate(&self, x: &MaterialPoint, f: &Mat3) -> Result<f64, IntegrandError> {
        let v = self.coefficient(x)? * self.base.energy(f);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(IntegrandError::NonFinite)
        }
    }

    pub fn stress(&self, x: &MaterialPoint, f: &Mat3) -> Result<Mat3, IntegrandError> {
        Ok(self.energy_stress(x, f)?.1)
    }

    pub fn energy_stress(&self, x: &MaterialPoint, f: &Mat3) -> Result<(f64, Mat3), IntegrandError> {
        let a = self.coefficient(x)?;
        let (e, s) = self.base.energy_stress(f);
        let (e, s) = (a * e, s * a);
        if e.is_finite() && s.iter().all(|v| v.is_finite()) {
            Ok((e, s))
        } else {
            Err(IntegrandError::NonFinite)
        }
    }

    /// `inf_z W(x; F̄ | z)` and a minimizing `z`.
    pub fn fiber_infimum(&self, x: &MaterialPoint, f_bar: &Mat3x2) -> Result<FiberInfimum, IntegrandError> {
        let a = self.coefficient(x)?;
        let mut starts = vec![Vec3::zeros()];
        for k in 0..2 {
            let c = f_bar.column(k).into_owned();
            starts.push(c);
            starts.push(-c);
        }
        for w in self.base.well_centers() {
            starts.push(w.column(2).into_owned());
        }
        let radius = self.base.derived_growth().fiber_radius(f_bar.norm());
        let mut fib = fiber_infimum_with(&self.base, f_bar, &starts, radius, &DescentSettings::default())?;
        fib.value *= a;
        Ok(fib)
    }

    /// Checks the growth sandwich on deterministic quasi-random samples with
    /// `|F|` between `1e-3` and `1e3`.
    pub fn verify_growth(&self, samples: usize) -> GrowthReport {
        let omega = self.omega.unwrap_or_else(Rect::unit);
        let mut violations = Vec::new();
        let mut count = 0;
        for i in 0..samples {
            let h = |d: usize| radical_inverse(i as u64 + 1, PRIMES[d]);
            let x = MaterialPoint::new(
                [
                    omega.min[0] + omega.width() * h(0),
                    omega.min[1] + omega.height() * h(1),
                ],
                2.0 * h(2) - 1.0,
            );
            let radius = 10f64.powf(-3.0 + 6.0 * h(3));
            let mut dir = Mat3::from_fn(|r, c| 2.0 * h(4 + 3 * r + c) - 1.0);
            if dir.norm() < 1e-3 {
                dir = Mat3::identity();
            }
            let f = dir * (radius / dir.norm());
            let value = match self.evaluate(&x, &f) {
                Ok(v) => v,
                Err(_) => f64::NAN,
            };
            let norm = f.norm();
            let lower = self.growth.lower(norm);
            let upper = self.growth.upper(norm);
            let slack = 1e-12 * value.abs().max(upper.abs()).max(1.0);
            let side = if !(value >= lower - slack) {
                Some((BoundSide::Lower, lower))
            } else if !(value <= upper + slack) {
                Some((BoundSide::Upper, upper))
            } else {
                None
            };
            if let Some((side, bound)) = side {
                count += 1;
                if violations.len() < GrowthReport::MAX_LISTED {
                    violations.push(GrowthViolation {
                        x,
                        f: to_rows(&f),
                        value,
                        bound,
                        side,
                    });
                }
            }
        }
        GrowthReport {
            samples,
            violation_count: count,
            violations,
        }
    }
}

/// Multistart minimization of `z ↦ w(F̄ | z)`.
///
/// Starts outside `radius` are skipped; among converged runs the lowest value
/// wins, earlier starts winning exact ties.
pub fn fiber_infimum_with<P: PointEnergy + ?Sized>(
    w: &P,
    f_bar: &Mat3x2,
    starts: &[Vec3],
    radius: f64,
    settings: &DescentSettings,
) -> Result<FiberInfimum, IntegrandError> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut fallback: Option<(f64, Vec3)> = None;
    let mut iterations = 0;
    let mut used = 0;
    for z0 in starts {
        if z0.norm() > radius {
            continue;
        }
        used += 1;
        let r = lbfgs(
            |z: &[f64], g: &mut [f64]| {
                let (e, s) = w.energy_stress(&join(f_bar, &Vec3::new(z[0], z[1], z[2])))?;
                for i in 0..3 {
                    g[i] = s[(i, 2)];
                }
                Ok::<_, IntegrandError>(e)
            },
            z0.as_slice().to_vec(),
            settings,
        )?;
        iterations += r.iterations;
        let z = Vec3::new(r.x[0], r.x[1], r.x[2]);
        let slot = if r.is_acceptable() { &mut best } else { &mut fallback };
        if slot.map_or(true, |(v, _)| r.value < v) {
            *slot = Some((r.value, z));
        }
    }
    match best {
        Some((value, z)) => Ok(FiberInfimum {
            value,
            z,
            starts: used,
            iterations,
        }),
        None => {
            let (v, z) = fallback.unwrap_or((f64::NAN, Vec3::zeros()));
            Err(IntegrandError::FiberNotConverged {
                best_value: v,
                best_z: [z[0], z[1], z[2]],
            })
        }
    }
}

const PRIMES: [u64; 13] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41];

/// Van der Corput radical inverse of `i` in base `b`.
pub(crate) fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_split_roundtrip() {
        let fb = Mat3x2::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let z = Vec3::new(7.0, 8.0, 9.0);
        let f = join(&fb, &z);
        assert_eq!(f.column(2).into_owned(), z);
        assert_eq!(f[(1, 1)], 4.0);
        assert_eq!(split(&f), (fb, z));
        assert_eq!(f.norm_squared(), (1..=9).map(|k| (k * k) as f64).sum::<f64>());
    }

    #[test]
    fn laminate_example() {
        let w = StoredEnergyDensity::squared_norm()
            .with_modulation(Modulation::two_layer(1.0, 3.0))
            .unwrap();
        let f = Mat3::from_fn(|i, j| if i == j && i < 2 { 1.0 } else { 0.0 });
        assert_eq!(w.evaluate(&MaterialPoint::new([0.1, 0.2], 0.5), &f).unwrap(), 6.0);
        assert_eq!(w.family(), Family::Composite);
        let g = w.growth();
        assert_eq!((g.beta_lower, g.beta_upper), (1.0, 3.0));
    }

    #[test]
    fn outside_domain_rejected() {
        let w = StoredEnergyDensity::squared_norm();
        let e = w.evaluate(&MaterialPoint::new([0.0, 0.0], 1.5), &Mat3::zeros());
        assert!(matches!(e, Err(IntegrandError::OutsideDomain { .. })));
        let w = w.with_omega(Rect::unit()).unwrap();
        assert!(w.evaluate(&MaterialPoint::new([2.0, 0.0], 0.0), &Mat3::zeros()).is_err());
    }

    #[test]
    fn deserialization_validates() {
        let bad = r#"{"base":{"family":"p-norm","p":0.5,"modulus":1.0}}"#;
        assert!(serde_json::from_str::<StoredEnergyDensity>(bad).is_err());
        let good = r#"{"base":{"family":"p-norm","p":2.0,"modulus":1.0}}"#;
        let w: StoredEnergyDensity = serde_json::from_str(good).unwrap();
        assert_eq!(w, StoredEnergyDensity::squared_norm());
        let back: StoredEnergyDensity = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(back.hash(), w.hash());
    }

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert_eq!(radical_inverse(4, 2), 0.125);
    }
}
