//! Named integrands for configs and the check suite.

use filmrelax::cell::symmetric_wells;
use filmrelax::integrand::IntegrandError;
use filmrelax::{BaseEnergy, Mat3, Modulation, StoredEnergyDensity, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// `|F|²`.
    SquaredNorm,
    /// `|F|³`.
    CubicNorm,
    /// `a(x₃)|F|²` with `a = 1` below the mid-plane and `3` above.
    Laminate,
    /// Quadratic with no coupling between the in-plane columns and the
    /// transverse column, so the transverse minimizer is `z = 0`.
    DecoupledQuadratic,
    /// `|F − A|²` with a nonzero third column in `A`.
    ShiftedQuadratic,
    /// Two wells `±a ⊗ e₁`, rank-one connected along an in-plane normal.
    TwoWell,
    /// The laminate multiplied by an in-plane checkerboard of period ½.
    Checkerboard,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::SquaredNorm,
        Preset::CubicNorm,
        Preset::Laminate,
        Preset::DecoupledQuadratic,
        Preset::ShiftedQuadratic,
        Preset::TwoWell,
        Preset::Checkerboard,
    ];

    pub fn base(self) -> BaseEnergy {
        match self {
            Preset::SquaredNorm | Preset::Laminate | Preset::Checkerboard => {
                BaseEnergy::PNorm { p: 2.0, modulus: 1.0 }
            }
            Preset::CubicNorm => BaseEnergy::PNorm { p: 3.0, modulus: 1.0 },
            Preset::DecoupledQuadratic => BaseEnergy::AnisotropicQuadratic {
                stiffness: decoupled_stiffness(),
                center: [[0.0; 3]; 3],
            },
            Preset::ShiftedQuadratic => BaseEnergy::shifted_quadratic(&shift_center()),
            Preset::TwoWell => BaseEnergy::TwoWell {
                wells: symmetric_wells(&two_well_direction())
                    .iter()
                    .map(filmrelax::integrand::to_rows)
                    .collect(),
                modulus: 1.0,
            },
        }
    }

    pub fn modulation(self) -> Modulation {
        match self {
            Preset::Laminate => Modulation::two_layer(1.0, 3.0),
            Preset::Checkerboard => Modulation::Product {
                factors: vec![Modulation::checkerboard(0.5, 1.0, 2.0), Modulation::two_layer(1.0, 3.0)],
            },
            _ => Modulation::uniform(),
        }
    }

    pub fn density(self) -> Result<StoredEnergyDensity, IntegrandError> {
        StoredEnergyDensity::new(self.base())?.with_modulation(self.modulation())
    }
}

/// The well offset `A = a ⊗ e₁` of the two-well preset.
pub fn two_well_direction() -> Mat3 {
    Vec3::new(0.4, -0.2, 0.3) * Vec3::x().transpose()
}

/// Center of the shifted quadratic; its third column is the selected `b₀`.
pub fn shift_center() -> Mat3 {
    Mat3::new(0.1, 0.0, 0.3, 0.0, 0.2, -0.2, 0.0, 0.0, 0.5)
}

/// Diagonally dominant, hence positive definite, with the in-plane entries
/// `(i, 0), (i, 1)` and the transverse entries `(i, 2)` in separate blocks.
pub fn decoupled_stiffness() -> [[f64; 9]; 9] {
    let mut c = [[0.0; 9]; 9];
    let diag = [2.0, 1.5, 1.0, 1.8, 2.2, 1.4, 1.2, 1.6, 2.0];
    for (i, d) in diag.iter().enumerate() {
        c[i][i] = *d;
    }
    for (i, j, v) in [(0, 4, 0.5), (1, 3, 0.3), (6, 7, 0.2), (2, 5, 0.3)] {
        c[i][j] = v;
        c[j][i] = v;
    }
    c
}
