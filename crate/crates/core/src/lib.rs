//! Numerical relaxation of heterogeneous hyperelastic thin films.
//!
//! The crate evaluates the effective energy densities that appear in the
//! zero-thickness limit of a clamped three-dimensional hyperelastic cylinder
//! `ω × (−ε, ε)` whose stored energy depends on both the in-plane point and the
//! through-thickness coordinate:
//!
//! * [`cell::membrane_density`]: the membrane density, an infimum over a
//!   transverse scale `L > 0` and laterally clamped perturbations of a
//!   through-thickness cell integral;
//! * [`cell::membrane_density_periodic`]: the same density through laterally
//!   periodic perturbations of the quasiconvexified integrand;
//! * [`cell::cosserat_density`]: the Cosserat density, where the averaged
//!   transverse derivative is prescribed;
//! * [`cell::quasiconvexify`] and [`cell::lamination_upper_bound`]: the 3D
//!   quasiconvex envelope and an independent first-order laminate bound.
//!
//! [`gamma`] minimizes the rescaled 3D thin-film energy at decreasing thickness
//! and compares it with the 2D limit functional, and [`tabulate`] samples the
//! densities on parameter grids for use by the 2D solver.

pub mod cell;
pub mod descent;
pub mod expr;
pub mod field;
pub mod gamma;
pub mod integrand;
pub mod tabulate;

pub use cell::{CellError, CellProblemSpec, CellSolution, InnerSolverConfig, LSearchConfig};
pub use field::{BoundaryMode, CellMesh, DiscreteField, Domain, QuadratureRule, Rect};
pub use gamma::{ConvergenceReport, LoadSystem, ThinFilmProblem};
pub use integrand::{
    join, split, BaseEnergy, GrowthSpec, MaterialPoint, Mat3, Mat3x2, Modulation,
    StoredEnergyDensity, Vec3,
};
pub use tabulate::{DensityTable, SampleGrid, TableKind};

/// Version string embedded in table provenance and reports.
pub const SOLVER_VERSION: &str = concat!("filmrelax-", env!("CARGO_PKG_VERSION"));
