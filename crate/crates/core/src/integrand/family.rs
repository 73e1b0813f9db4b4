//! Homogeneous base energies `w(F)`.

use nalgebra::{SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{GrowthSpec, IntegrandError, Mat3, Vec3};

pub type Rows3 = [[f64; 3]; 3];

pub fn from_rows(r: &Rows3) -> Mat3 {
    Mat3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

pub fn to_rows(m: &Mat3) -> Rows3 {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// The `x`-independent part of a stored energy.
///
/// Matrices are given row by row. The stiffness of the quadratic family acts
/// on the row-major flattening of `F`, entry `(i, j)` at index `3i + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
#[serde(deny_unknown_fields)]
pub enum BaseEnergy {
    /// `μ |F|^p`.
    PNorm { p: f64, modulus: f64 },
    /// `½ (F − A) : C : (F − A)` with `C` symmetric positive definite.
    AnisotropicQuadratic {
        stiffness: [[f64; 9]; 9],
        #[serde(default)]
        center: Rows3,
    },
    /// `μ min_i |F − A_i|²`; ties resolve to the lowest index.
    TwoWell { wells: Vec<Rows3>, modulus: f64 },
}

impl BaseEnergy {
    /// `½ F : C : F` with `C = 2I`, shifted to `center`: `|F − A|²`.
    pub fn shifted_quadratic(center: &Mat3) -> Self {
        let mut stiffness = [[0.0; 9]; 9];
        for (i, row) in stiffness.iter_mut().enumerate() {
            row[i] = 2.0;
        }
        BaseEnergy::AnisotropicQuadratic {
            stiffness,
            center: to_rows(center),
        }
    }

    pub fn validate(&self) -> Result<(), IntegrandError> {
        let bad = |msg: &str| Err(IntegrandError::InvalidParameter(msg.to_string()));
        match self {
            BaseEnergy::PNorm { p, modulus } => {
                if !(p.is_finite() && *p > 1.0) {
                    return bad("p-norm exponent must satisfy 1 < p < inf");
                }
                if !(modulus.is_finite() && *modulus > 0.0) {
                    return bad("p-norm modulus must be positive");
                }
            }
            BaseEnergy::AnisotropicQuadratic { stiffness, center } => {
                if stiffness.iter().flatten().chain(center.iter().flatten()).any(|v| !v.is_finite()) {
                    return bad("quadratic coefficients must be finite");
                }
                let c = stiffness_matrix(stiffness);
                if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                    return bad("stiffness must be symmetric");
                }
                let (lo, _) = eigen_range(stiffness);
                if lo <= 0.0 {
                    return bad("stiffness must be positive definite");
                }
            }
            BaseEnergy::TwoWell { wells, modulus } => {
                if wells.is_empty() {
                    return bad("two-well family needs at least one well");
                }
                if wells.iter().flatten().flatten().any(|v| !v.is_finite()) {
                    return bad("well matrices must be finite");
                }
                if !(modulus.is_finite() && *modulus > 0.0) {
                    return bad("two-well modulus must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn exponent(&self) -> f64 {
        match self {
            BaseEnergy::PNorm { p, .. } => *p,
            _ => 2.0,
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            BaseEnergy::PNorm { .. } | BaseEnergy::AnisotropicQuadratic { .. } => true,
            BaseEnergy::TwoWell { wells, .. } => wells.iter().all(|w| w == &wells[0]),
        }
    }

    /// Points where the energy is minimal, used as descent starts.
    pub fn well_centers(&self) -> Vec<Mat3> {
        match self {
            BaseEnergy::PNorm { .. } => vec![Mat3::zeros()],
            BaseEnergy::AnisotropicQuadratic { center, .. } => vec![from_rows(center)],
            BaseEnergy::TwoWell { wells, .. } => wells.iter().map(from_rows).collect(),
        }
    }

    /// Rank-one differences `A_i − A_j = a ⊗ n` between wells, with `|n| = 1`.
    pub fn rank_one_connections(&self) -> Vec<(Vec3, Vec3)> {
        let mut out = Vec::new();
        if let BaseEnergy::TwoWell { wells, .. } = self {
            for i in 0..wells.len() {
                for j in i + 1..wells.len() {
                    let d = from_rows(&wells[i]) - from_rows(&wells[j]);
                    if let Some(pair) = rank_one_factor(&d) {
                        out.push(pair);
                    }
                }
            }
        }
        out
    }

    /// Growth constants implied by the coefficients.
    pub fn derived_growth(&self) -> GrowthSpec {
        match self {
            BaseEnergy::PNorm { p, modulus } => GrowthSpec::new(*p, *modulus, *modulus),
            BaseEnergy::AnisotropicQuadratic { stiffness, center } => {
                let (lo, hi) = eigen_range(stiffness);
                let a2 = from_rows(center).norm_squared();
                if a2 == 0.0 {
                    GrowthSpec::new(2.0, 0.5 * lo, 0.5 * hi)
                } else {
                    // |F − A|² >= |F|²/2 − |A|² and <= 2(|F|² + |A|²)
                    GrowthSpec::new(2.0, 0.25 * lo, hi * a2.max(1.0)).with_offset(0.5 * lo * a2)
                }
            }
            BaseEnergy::TwoWell { wells, modulus } => {
                let norms: Vec<f64> = wells.iter().map(|w| from_rows(w).norm_squared()).collect();
                let max = norms.iter().cloned().fold(0.0, f64::max);
                let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
                if max == 0.0 {
                    GrowthSpec::new(2.0, *modulus, *modulus)
                } else {
                    GrowthSpec::new(2.0, 0.5 * modulus, 2.0 * modulus * min.max(1.0))
                        .with_offset(modulus * max)
                }
            }
        }
    }

    pub fn energy(&self, f: &Mat3) -> f64 {
        match self {
            BaseEnergy::PNorm { p, modulus } => {
                if *p == 2.0 {
                    modulus * f.norm_squared()
                } else {
                    modulus * f.norm().powf(*p)
                }
            }
            BaseEnergy::AnisotropicQuadratic { stiffness, center } => {
                let d = flatten(&(f - from_rows(center)));
                let cd = apply(stiffness, &d);
                0.5 * d.iter().zip(&cd).map(|(a, b)| a * b).sum::<f64>()
            }
            BaseEnergy::TwoWell { wells, modulus } => modulus * nearest_well(wells, f).1,
        }
    }

    pub fn energy_stress(&self, f: &Mat3) -> (f64, Mat3) {
        match self {
            BaseEnergy::PNorm { p, modulus } => {
                if *p == 2.0 {
                    (modulus * f.norm_squared(), f * (2.0 * modulus))
                } else {
                    let n = f.norm();
                    if n == 0.0 {
                        return (0.0, Mat3::zeros());
                    }
                    let np = n.powf(*p);
                    (modulus * np, f * (modulus * p * np / (n * n)))
                }
            }
            BaseEnergy::AnisotropicQuadratic { stiffness, center } => {
                let d = flatten(&(f - from_rows(center)));
                let cd = apply(stiffness, &d);
                let e = 0.5 * d.iter().zip(&cd).map(|(a, b)| a * b).sum::<f64>();
                (e, unflatten(&cd))
            }
            BaseEnergy::TwoWell { wells, modulus } => {
                let (k, d2) = nearest_well(wells, f);
                (modulus * d2, (f - from_rows(&wells[k])) * (2.0 * modulus))
            }
        }
    }
}

fn nearest_well(wells: &[Rows3], f: &Mat3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, w) in wells.iter().enumerate() {
        let d2 = (f - from_rows(w)).norm_squared();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best
}

fn flatten(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = m[(i, j)];
        }
    }
    out
}

fn unflatten(v: &[f64; 9]) -> Mat3 {
    Mat3::from_fn(|i, j| v[3 * i + j])
}

fn apply(c: &[[f64; 9]; 9], d: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for (o, row) in out.iter_mut().zip(c) {
        *o = row.iter().zip(d).map(|(a, b)| a * b).sum();
    }
    out
}

fn stiffness_matrix(c: &[[f64; 9]; 9]) -> SMatrix<f64, 9, 9> {
    SMatrix::<f64, 9, 9>::from_fn(|i, j| c[i][j])
}

fn eigen_range(c: &[[f64; 9]; 9]) -> (f64, f64) {
    let m = stiffness_matrix(c);
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    (eig.min(), eig.max())
}

/// Factors `d = a ⊗ n` when `d` has rank one.
pub fn rank_one_factor(d: &Mat3) -> Option<(Vec3, Vec3)> {
    let svd = d.svd(true, true);
    let mut idx = [0, 1, 2];
    idx.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let s1 = svd.singular_values[idx[0]];
    let s2 = svd.singular_values[idx[1]];
    if s1 <= 0.0 || s2 > 1e-10 * s1 {
        return None;
    }
    let u = svd.u?.column(idx[0]).into_owned();
    let v = svd.v_t?.row(idx[0]).transpose();
    let (u, v) = canonical_sign(u * s1, v);
    Some((u, v))
}

fn canonical_sign(a: Vec3, n: Vec3) -> (Vec3, Vec3) {
    let k = (0..3).max_by(|i, j| n[*i].abs().total_cmp(&n[*j].abs())).unwrap();
    if n[k] < 0.0 {
        (-a, -n)
    } else {
        (a, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_norm_values() {
        let w = BaseEnergy::PNorm { p: 2.0, modulus: 1.0 };
        assert_eq!(w.energy(&Mat3::identity()), 3.0);
        assert_eq!(w.energy_stress(&Mat3::identity()).1, Mat3::identity() * 2.0);
        let w3 = BaseEnergy::PNorm { p: 3.0, modulus: 1.0 };
        assert_eq!(w3.energy_stress(&Mat3::zeros()), (0.0, Mat3::zeros()));
    }

    #[test]
    fn shifted_quadratic_matches_distance() {
        let a = Mat3::from_fn(|i, j| (i + 2 * j) as f64 * 0.1);
        let w = BaseEnergy::shifted_quadratic(&a);
        let f = Mat3::from_fn(|i, j| (i * j) as f64 - 0.5);
        assert!((w.energy(&f) - (f - a).norm_squared()).abs() < 1e-12);
        let g = w.derived_growth();
        assert_eq!(g.p, 2.0);
    }

    #[test]
    fn two_well_tie_picks_first() {
        let a = Mat3::from_fn(|i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 });
        let w = BaseEnergy::TwoWell {
            wells: vec![to_rows(&a), to_rows(&-a)],
            modulus: 1.0,
        };
        let (e, s) = w.energy_stress(&Mat3::zeros());
        assert_eq!(e, 1.0);
        assert_eq!(s, -a * 2.0);
        assert!(!w.is_convex());
    }

    #[test]
    fn rank_one_detection() {
        let a = Vec3::new(0.3, -1.0, 2.0);
        let n = Vec3::new(0.0, 0.6, 0.8);
        let (a2, n2) = rank_one_factor(&(a * n.transpose())).unwrap();
        assert!((a2 * n2.transpose() - a * n.transpose()).norm() < 1e-12);
        assert!((n2.norm() - 1.0).abs() < 1e-12);
        assert!(rank_one_factor(&Mat3::identity()).is_none());
    }

    #[test]
    fn rejects_indefinite_stiffness() {
        let mut c = [[0.0; 9]; 9];
        for (i, row) in c.iter_mut().enumerate() {
            row[i] = if i == 4 { -1.0 } else { 1.0 };
        }
        let w = BaseEnergy::AnisotropicQuadratic {
            stiffness: c,
            center: [[0.0; 3]; 3],
        };
        assert!(w.validate().is_err());
    }
}
