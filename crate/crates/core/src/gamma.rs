//! Thin-film energies at finite thickness and their 2D limit.
//!
//! The cylinder `ω × (−ε, ε)` is rescaled to `Ω = ω × (−1, 1)`; the energy of a
//! deformation `u` on `Ω` is
//!
//! ```text
//! E_ε(u) = ∫_Ω W(x; D_αu | ε⁻¹D₃u) − ∫_Ω f·u − ∫_ω (g⁺·u⁺ + g⁻·u⁻) − 2∫_ω g₀⁺·b̄_ε
//! ```
//!
//! with `u⁺, u⁻` the top and bottom traces and `b̄_ε = (u⁺ − u⁻)/(2ε)`. The
//! lateral boundary is clamped to `F̄_bc x_α`. The limit functional acts on a
//! membrane deformation `v` and a Cosserat vector field `b̄`:
//!
//! ```text
//! J(v, b̄) = 2∫_ω Q*W(x_α; D_αv | b̄) − ∫_ω (2f̄ + g⁺ + g⁻)·v − 2∫_ω g₀⁺·b̄
//! ```
//!
//! where `f̄` is the transverse mean of `f`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::RwLock;
use std::time::Instant;

use nalgebra::Vector2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{cosserat_density_with, CellError, CellProblemSpec, InnerSolverConfig, QuasiconvexSurrogate};
use crate::descent::{lbfgs, DescentSettings};
use crate::expr::Expr;
use crate::field::{
    surface_load_vector, volume_load_vector, BoundaryMode, CellMesh, DiscreteField, DofMap, Domain,
    EnergyAssembler, FieldError, QuadratureRule, XMode,
};
use crate::integrand::{join, IntegrandError, Mat3, Mat3x2, MaterialPoint, Rect, StoredEnergyDensity, Vec3};
use crate::tabulate::{DensityTable, TableError, TableKind};

/// Largest admissible `|g₀(x_α, 1) + g₀(x_α, −1)|`.
pub const COMPATIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GammaError {
    #[error("invalid thin-film problem: {0}")]
    InvalidProblem(String),
    #[error("incompatible loads: |g0(x, 1) + g0(x, -1)| reaches {defect:e} at x = ({x1}, {x2})")]
    Incompatible { defect: f64, x1: f64, x2: f64 },
    #[error("field does not match the problem: {0}")]
    BoundaryMismatch(String),
    #[error("minimization did not converge (best value {best_value}, epsilon {epsilon:?})")]
    NotConverged { best_value: f64, epsilon: Option<f64> },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Integrand(#[from] IntegrandError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Table(#[from] TableError),
}

fn zero_vector() -> [Expr; 3] {
    [Expr::constant(0.0), Expr::constant(0.0), Expr::constant(0.0)]
}

fn eval3(e: &[Expr; 3], x: [f64; 3]) -> Vec3 {
    Vec3::new(e[0].eval(x), e[1].eval(x), e[2].eval(x))
}

/// Four-point Gauss–Legendre nodes and weights on `(−1, 1)`.
const GL4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// Volume load `f`, order-`ε` surface load `g` and order-one surface load
/// `g₀`, each a closed-form expression in `(x1, x2, x3)` of the rescaled
/// cylinder. Surface loads are read at `x3 = ±1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSystem {
    #[serde(default = "zero_vector")]
    pub f: [Expr; 3],
    #[serde(default = "zero_vector")]
    pub g: [Expr; 3],
    #[serde(default = "zero_vector")]
    pub g0: [Expr; 3],
}

impl Default for LoadSystem {
    fn default() -> Self {
        Self::zero()
    }
}

impl LoadSystem {
    pub fn zero() -> Self {
        Self {
            f: zero_vector(),
            g: zero_vector(),
            g0: zero_vector(),
        }
    }

    /// Uniform moment load `g₀ = ±m` on the top and bottom faces.
    pub fn uniform_moment(m: &Vec3) -> Self {
        let g0 = [0, 1, 2].map(|i| Expr::parse(&format!("{:e} * x3", m[i])).expect("valid expression"));
        Self { g0, ..Self::zero() }
    }

    pub fn is_zero(&self) -> bool {
        self.f.iter().chain(&self.g).chain(&self.g0).all(Expr::is_zero)
    }

    pub fn has_moment(&self) -> bool {
        !self.g0.iter().all(Expr::is_zero)
    }

    pub fn volume(&self, x: [f64; 3]) -> Vec3 {
        eval3(&self.f, x)
    }

    /// `g` on the top (`x3 = 1`) or bottom face.
    pub fn surface(&self, x_alpha: [f64; 2], top: bool) -> Vec3 {
        eval3(&self.g, [x_alpha[0], x_alpha[1], if top { 1.0 } else { -1.0 }])
    }

    /// `g₀⁺`, the order-one load on the top face.
    pub fn moment(&self, x_alpha: [f64; 2]) -> Vec3 {
        eval3(&self.g0, [x_alpha[0], x_alpha[1], 1.0])
    }

    /// `f̄(x_α) = ½∫₋₁¹ f dx₃` by four-point Gauss–Legendre.
    pub fn mean_volume(&self, x_alpha: [f64; 2]) -> Vec3 {
        GL4.iter()
            .map(|(t, w)| self.volume([x_alpha[0], x_alpha[1], *t]) * (0.5 * w))
            .sum()
    }

    /// `2f̄ + g⁺ + g⁻`, the in-plane load density of the limit functional.
    pub fn membrane_load(&self, x_alpha: [f64; 2]) -> Vec3 {
        self.mean_volume(x_alpha) * 2.0 + self.surface(x_alpha, true) + self.surface(x_alpha, false)
    }

    /// Checks `g₀⁺ + g₀⁻ = 0` at the given in-plane points.
    pub fn check_compatibility(&self, points: &[[f64; 2]]) -> Result<(), GammaError> {
        let mut worst = (0.0, [0.0; 2]);
        for p in points {
            let s = eval3(&self.g0, [p[0], p[1], 1.0]) + eval3(&self.g0, [p[0], p[1], -1.0]);
            let d = s.amax();
            if !(d <= worst.0) {
                worst = (d, *p);
            }
        }
        if worst.0 > COMPATIBILITY_TOL || worst.0.is_nan() {
            return Err(GammaError::Incompatible {
                defect: worst.0,
                x1: worst.1[0],
                x2: worst.1[1],
            });
        }
        Ok(())
    }
}

/// A clamped thin film together with the thicknesses to study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThinFilmProblem {
    pub w: StoredEnergyDensity,
    pub omega: Rect,
    /// Lateral boundary datum: `u = F̄_bc x_α` on `∂ω × (−1, 1)`.
    pub f_bc: Mat3x2,
    #[serde(default)]
    pub loads: LoadSystem,
    /// Strictly decreasing, in `(0, 1]`.
    pub epsilons: Vec<f64>,
    /// In-plane cells, shared by the 3D and the limit meshes.
    pub cells: [usize; 2],
    /// Cells across the thickness of the rescaled cylinder.
    #[serde(default = "default_transverse_cells")]
    pub transverse_cells: usize,
    #[serde(default)]
    pub inner: InnerSolverConfig,
}

fn default_transverse_cells() -> usize {
    8
}

impl ThinFilmProblem {
    pub fn new(w: StoredEnergyDensity, omega: Rect, f_bc: Mat3x2, epsilons: Vec<f64>) -> Self {
        Self {
            w,
            omega,
            f_bc,
            loads: LoadSystem::zero(),
            epsilons,
            cells: [8, 8],
            transverse_cells: default_transverse_cells(),
            inner: InnerSolverConfig::default(),
        }
    }

    pub fn with_loads(mut self, loads: LoadSystem) -> Self {
        self.loads = loads;
        self
    }

    pub fn with_cells(mut self, in_plane: [usize; 2], transverse: usize) -> Self {
        self.cells = in_plane;
        self.transverse_cells = transverse;
        self
    }

    pub fn validate(&self) -> Result<(), GammaError> {
        if !self.omega.is_valid() {
            return Err(GammaError::InvalidProblem("omega must be a non-degenerate rectangle".into()));
        }
        if let Some(dom) = self.w.omega() {
            let inside = dom.contains(self.omega.min, 1e-12) && dom.contains(self.omega.max, 1e-12);
            if !inside {
                return Err(GammaError::InvalidProblem("omega exceeds the integrand's domain".into()));
            }
        }
        if self.epsilons.is_empty() {
            return Err(GammaError::InvalidProblem("at least one thickness is needed".into()));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(GammaError::InvalidProblem("thicknesses must lie in (0, 1]".into()));
        }
        if self.epsilons.windows(2).any(|p| !(p[1] < p[0])) {
            return Err(GammaError::InvalidProblem("thicknesses must be strictly decreasing".into()));
        }
        if self.cells.iter().any(|n| *n < 2) || self.transverse_cells < 2 {
            return Err(GammaError::InvalidProblem("meshes need at least two cells per direction".into()));
        }
        if self.f_bc.iter().any(|v| !v.is_finite()) {
            return Err(GammaError::InvalidProblem("boundary datum must be finite".into()));
        }
        self.loads.check_compatibility(&self.plate().sample_points())
    }

    /// The mesh of the rescaled cylinder, clamped to the affine datum.
    pub fn mesh(&self) -> Result<CellMesh, GammaError> {
        Ok(CellMesh::new(
            [self.cells[0], self.cells[1], self.transverse_cells],
            Domain::Cylinder { omega: self.omega },
            BoundaryMode::LateralAffine { f_bar: self.f_bc },
        )?)
    }

    pub fn plate(&self) -> PlateMesh {
        PlateMesh {
            omega: self.omega,
            n: self.cells,
        }
    }

    /// `F̄_bc x_α` on every node.
    pub fn affine_field(&self) -> Result<DiscreteField, GammaError> {
        let f = self.f_bc;
        Ok(DiscreteField::from_fn(&self.mesh()?, move |x| f * Vector2::new(x[0], x[1])))
    }

    /// Nodal vector `ℓ` with `Σ ℓ·u` the load work at thickness `ε`.
    pub fn load_vector(&self, mesh: &CellMesh, eps: f64) -> Vec<Vec3> {
        let loads = &self.loads;
        let mut ell = if loads.f.iter().all(Expr::is_zero) {
            vec![Vec3::zeros(); mesh.node_count()]
        } else {
            volume_load_vector(mesh, &QuadratureRule::gauss2(), |x| loads.volume(x))
        };
        let mut add = |v: Vec<Vec3>, c: f64| {
            for (a, b) in ell.iter_mut().zip(v) {
                *a += b * c;
            }
        };
        if !loads.g.iter().all(Expr::is_zero) {
            add(surface_load_vector(mesh, true, |x| loads.surface(x, true)), 1.0);
            add(surface_load_vector(mesh, false, |x| loads.surface(x, false)), 1.0);
        }
        if loads.has_moment() {
            add(surface_load_vector(mesh, true, |x| loads.moment(x)), 1.0 / eps);
            add(surface_load_vector(mesh, false, |x| loads.moment(x)), -1.0 / eps);
        }
        ell
    }
}

fn check_epsilon(eps: f64) -> Result<(), GammaError> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(GammaError::InvalidProblem(format!("thickness {eps} outside (0, 1]")))
    }
}

/// The rescaled energy `E_ε(u)` including load terms.
pub fn scaled_energy(problem: &ThinFilmProblem, eps: f64, u: &DiscreteField) -> Result<f64, GammaError> {
    check_epsilon(eps)?;
    let mesh = problem.mesh()?;
    if u.mesh().domain() != mesh.domain() || u.mesh().boundary() != mesh.boundary() {
        return Err(GammaError::BoundaryMismatch(
            "field must live on the problem's cylinder with the lateral affine datum".into(),
        ));
    }
    let asm = EnergyAssembler::new(u.mesh(), &QuadratureRule::gauss2(), &problem.w, XMode::Full, 1.0 / eps, 1.0)?;
    let bulk = asm.energy(u.values())?;
    let ell = problem.load_vector(u.mesh(), eps);
    let work: f64 = ell.iter().zip(u.values()).map(|(a, b)| a.dot(b)).sum();
    Ok(bulk - work)
}

/// `b̄_ε = (u⁺ − u⁻)/(2ε)` at every lateral node position.
pub fn cosserat_average(u: &DiscreteField, eps: f64) -> Vec<Vec3> {
    u.transverse_average(1.0 / (2.0 * eps))
}

/// `(∫_ω |b̄|²)^{1/2}` by the trapezoidal rule on the lateral node grid.
fn lateral_l2(values: &[Vec3], omega: &Rect, n: [usize; 2]) -> f64 {
    let trap = |i: usize, n: usize| if i == 0 || i == n { 0.5 } else { 1.0 };
    let cell = omega.area() / (n[0] * n[1]) as f64;
    let mut s = 0.0;
    for j in 0..=n[1] {
        for i in 0..=n[0] {
            s += trap(i, n[0]) * trap(j, n[1]) * values[i + (n[0] + 1) * j].norm_squared();
        }
    }
    (s * cell).sqrt()
}

#[derive(Debug, Clone)]
pub struct ThinFilmSolution {
    pub epsilon: f64,
    pub energy: f64,
    pub field: DiscreteField,
    /// `b̄_ε` per lateral node, indexed `i + (n1 + 1) j`.
    pub bbar: Vec<Vec3>,
    pub bbar_norm: f64,
    pub iterations: usize,
    pub starts: usize,
}

/// Minimizes `E_ε` from the affine field; nonconvex energies also try a
/// seeded random perturbation and keep the lower value.
pub fn minimize_thin_film(problem: &ThinFilmProblem, eps: f64) -> Result<ThinFilmSolution, GammaError> {
    problem.validate()?;
    check_epsilon(eps)?;
    if !problem.epsilons.iter().any(|e| (e - eps).abs() <= 1e-15 * e.abs()) {
        log::debug!("thickness {eps} is not part of the study list");
    }
    let mesh = problem.mesh()?;
    let asm = EnergyAssembler::new(&mesh, &QuadratureRule::gauss2(), &problem.w, XMode::Full, 1.0 / eps, 1.0)?;
    let dofs = DofMap::new(&mesh);
    let ell = problem.load_vector(&mesh, eps);
    let mut ell_free = vec![0.0; dofs.len()];
    dofs.pull_back(&ell, &mut ell_free);
    let mut pinned = vec![Vec3::zeros(); mesh.node_count()];
    dofs.expand(&vec![0.0; dofs.len()], &mut pinned);
    let work0: f64 = ell.iter().zip(&pinned).map(|(a, b)| a.dot(b)).sum();

    let affine = dofs.restrict(problem.affine_field()?.values());
    let mut starts = vec![affine.clone()];
    if !problem.w.is_convex() && problem.inner.multistart > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(problem.inner.seed ^ eps.to_bits());
        let amp = 0.1 * mesh.spacing()[0] * problem.f_bc.norm().max(1.0);
        starts.push(affine.iter().map(|v| v + amp * rng.random_range(-1.0..1.0)).collect());
    }

    let settings = problem.inner.descent();
    let mut reduced = asm.reduced(&dofs);
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    let mut iterations = 0;
    let n_starts = starts.len();
    for x0 in starts {
        let r = lbfgs(
            |x: &[f64], g: &mut [f64]| {
                let e = reduced.eval(x, g)?;
                let mut work = work0;
                for i in 0..x.len() {
                    work += ell_free[i] * x[i];
                    g[i] -= ell_free[i];
                }
                Ok::<_, GammaError>(e - work)
            },
            x0,
            &settings,
        )?;
        iterations += r.iterations;
        if best.as_ref().map_or(true, |b| r.value < b.0) {
            let ok = r.is_acceptable();
            best = Some((r.value, r.x, ok));
        }
    }
    let (energy, x, ok) = best.expect("at least one start");
    if !ok {
        return Err(GammaError::NotConverged {
            best_value: energy,
            epsilon: Some(eps),
        });
    }
    let mut u = vec![Vec3::zeros(); mesh.node_count()];
    dofs.expand(&x, &mut u);
    let field = DiscreteField::from_values(&mesh, u)?;
    let bbar = cosserat_average(&field, eps);
    let bbar_norm = lateral_l2(&bbar, &problem.omega, problem.cells);
    Ok(ThinFilmSolution {
        epsilon: eps,
        energy,
        field,
        bbar,
        bbar_norm,
        iterations,
        starts: n_starts,
    })
}

/// `F̄ x_α + φ`, with a cell field `φ` on `(0,1)² × (−1,1)` repeated
/// periodically over `ω`. The cell field should vanish on its lateral faces
/// and its node spacing must match the problem mesh.
pub fn tile_cell_field(problem: &ThinFilmProblem, cell: &DiscreteField) -> Result<DiscreteField, GammaError> {
    let mesh = problem.mesh()?;
    let (h, hc) = (mesh.spacing(), cell.mesh().spacing());
    if cell.mesh().domain() != &Domain::UnitCell || (0..3).any(|d| (h[d] - hc[d]).abs() > 1e-12 * hc[d]) {
        return Err(GammaError::BoundaryMismatch(
            "cell field must live on the unit cell with the problem's node spacing".into(),
        ));
    }
    let f = problem.f_bc;
    let wrap = |t: f64| {
        let r = t - t.floor();
        if r > 1.0 - 1e-12 { 0.0 } else { r }
    };
    Ok(DiscreteField::from_fn(&mesh, |x| {
        f * Vector2::new(x[0], x[1]) + cell.interpolate([wrap(x[0]), wrap(x[1]), x[2]])
    }))
}

/// Rectangular bilinear mesh of `ω` for the limit functional.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateMesh {
    pub omega: Rect,
    pub n: [usize; 2],
}

impl PlateMesh {
    pub fn node_count(&self) -> usize {
        (self.n[0] + 1) * (self.n[1] + 1)
    }

    pub fn element_count(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn spacing(&self) -> [f64; 2] {
        [self.omega.width() / self.n[0] as f64, self.omega.height() / self.n[1] as f64]
    }

    pub fn node_coords(&self, idx: usize) -> [f64; 2] {
        let (i, j) = (idx % (self.n[0] + 1), idx / (self.n[0] + 1));
        let h = self.spacing();
        [self.omega.min[0] + h[0] * i as f64, self.omega.min[1] + h[1] * j as f64]
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let (i, j) = (idx % (self.n[0] + 1), idx / (self.n[0] + 1));
        i == 0 || j == 0 || i == self.n[0] || j == self.n[1]
    }

    /// Nodes in the order `(i,j), (i+1,j), (i,j+1), (i+1,j+1)`.
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let (i, j) = (e % self.n[0], e / self.n[0]);
        let row = self.n[0] + 1;
        let a = i + row * j;
        [a, a + 1, a + row, a + row + 1]
    }

    pub fn element_centroid(&self, e: usize) -> [f64; 2] {
        let (i, j) = (e % self.n[0], e / self.n[0]);
        let h = self.spacing();
        [
            self.omega.min[0] + h[0] * (i as f64 + 0.5),
            self.omega.min[1] + h[1] * (j as f64 + 0.5),
        ]
    }

    /// 2×2 Gauss points of element `e`: `(x, weight, shape values, shape gradients)`.
    fn gauss(&self, e: usize) -> [([f64; 2], f64, [f64; 4], [[f64; 2]; 4]); 4] {
        let h = self.spacing();
        let o = self.node_coords(self.element_nodes(e)[0]);
        let gp = 0.5 / 3f64.sqrt();
        let pts = [0.5 - gp, 0.5 + gp];
        let w = 0.25 * h[0] * h[1];
        let mut out = [([0.0; 2], 0.0, [0.0; 4], [[0.0; 2]; 4]); 4];
        for (q, (s, t)) in [(pts[0], pts[0]), (pts[1], pts[0]), (pts[0], pts[1]), (pts[1], pts[1])]
            .into_iter()
            .enumerate()
        {
            let x = [o[0] + h[0] * s, o[1] + h[1] * t];
            let n = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
            let dn = [
                [-(1.0 - t) / h[0], -(1.0 - s) / h[1]],
                [(1.0 - t) / h[0], -s / h[1]],
                [-t / h[0], (1.0 - s) / h[1]],
                [t / h[0], s / h[1]],
            ];
            out[q] = (x, w, n, dn);
        }
        out
    }

    /// Element centroids and all Gauss points, for load compatibility checks.
    pub fn sample_points(&self) -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = (0..self.node_count()).map(|i| self.node_coords(i)).collect();
        for e in 0..self.element_count() {
            out.push(self.element_centroid(e));
            out.extend(self.gauss(e).iter().map(|g| g.0));
        }
        out
    }
}

/// Pointwise Cosserat density `Q*W(x_α; F̄ | z)` with its derivative with
/// respect to `(F̄ | z)`.
pub trait DensitySource: Sync {
    fn density(&self, x_alpha: [f64; 2], f_bar: &Mat3x2, z: &Vec3) -> Result<(f64, Mat3), GammaError>;

    /// True when the source already minimizes over `z` (a membrane table), so
    /// the Cosserat field carries no energy.
    fn eliminates_z(&self) -> bool {
        false
    }
}

/// Rounds to a binary grid of spacing `2⁻⁴⁰`.
fn quantize(v: f64) -> (i64, f64) {
    const SCALE: f64 = (1u64 << 40) as f64;
    let k = (v * SCALE).round();
    (k as i64, k / SCALE)
}

/// Cell solves on demand, cached by (quantized) arguments. When the
/// modulation does not depend on `x_α`, all in-plane points share entries.
pub struct CellSource<'a> {
    w: &'a StoredEnergyDensity,
    template: CellProblemSpec,
    surrogate: QuasiconvexSurrogate,
    x_dependent: bool,
    cache: RwLock<HashMap<Vec<i64>, (f64, Mat3)>>,
}

impl<'a> CellSource<'a> {
    pub fn new(w: &'a StoredEnergyDensity, template: CellProblemSpec) -> Result<Self, GammaError> {
        template.validate()?;
        Ok(Self {
            w,
            surrogate: QuasiconvexSurrogate::new(w.base(), &template.inner)?,
            template,
            x_dependent: w.modulation().depends_on_x_alpha(),
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// Number of distinct cell solves performed so far.
    pub fn solves(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }
}

impl DensitySource for CellSource<'_> {
    fn density(&self, x_alpha: [f64; 2], f_bar: &Mat3x2, z: &Vec3) -> Result<(f64, Mat3), GammaError> {
        let mut key = Vec::with_capacity(11);
        let x = if self.x_dependent {
            let (k0, q0) = quantize(x_alpha[0]);
            let (k1, q1) = quantize(x_alpha[1]);
            key.extend([k0, k1]);
            [q0, q1]
        } else {
            self.template.x0.x_alpha
        };
        let mut fq = Mat3x2::zeros();
        for (dst, src) in fq.iter_mut().zip(f_bar.iter()) {
            let (k, q) = quantize(*src);
            key.push(k);
            *dst = q;
        }
        let mut zq = Vec3::zeros();
        for (dst, src) in zq.iter_mut().zip(z.iter()) {
            let (k, q) = quantize(*src);
            key.push(k);
            *dst = q;
        }
        if let Some(v) = self.cache.read().ok().and_then(|c| c.get(&key).copied()) {
            return Ok(v);
        }
        let mut spec = self.template.clone().with_z(zq);
        spec.x0 = MaterialPoint::new(x, 0.0);
        spec.f_bar = fq;
        spec.warm_start = None;
        let sol = cosserat_density_with(self.w, &spec, &self.surrogate)?;
        let v = (sol.value, sol.dual);
        if let Ok(mut c) = self.cache.write() {
            c.insert(key, v);
        }
        Ok(v)
    }
}

/// Interpolated densities from a table. A membrane table yields
/// `W̲(x_α; F̄)` regardless of `z`.
pub struct TableSource<'a> {
    table: &'a DensityTable,
}

impl<'a> TableSource<'a> {
    pub fn new(table: &'a DensityTable) -> Self {
        Self { table }
    }
}

impl DensitySource for TableSource<'_> {
    fn density(&self, x_alpha: [f64; 2], f_bar: &Mat3x2, z: &Vec3) -> Result<(f64, Mat3), GammaError> {
        let (v, mut g) = self.table.query_gradient(x_alpha, f_bar, z)?;
        if self.table.kind() == TableKind::Membrane {
            g.set_column(2, &Vec3::zeros());
        }
        Ok((v, g))
    }

    fn eliminates_z(&self) -> bool {
        self.table.kind() == TableKind::Membrane
    }
}

/// Precomputed load integrals of the limit functional on a plate mesh.
struct LimitLoads {
    /// `∫ (2f̄ + g⁺ + g⁻) N_a` per node.
    nodal: Vec<Vec3>,
    /// `2∫_e g₀⁺` per element.
    moment: Vec<Vec3>,
}

impl LimitLoads {
    fn new(mesh: &PlateMesh, loads: &LoadSystem) -> Self {
        let mut nodal = vec![Vec3::zeros(); mesh.node_count()];
        let mut moment = vec![Vec3::zeros(); mesh.element_count()];
        for e in 0..mesh.element_count() {
            let nodes = mesh.element_nodes(e);
            for (x, w, n, _) in mesh.gauss(e) {
                let p = loads.membrane_load(x) * w;
                for a in 0..4 {
                    nodal[nodes[a]] += p * n[a];
                }
                moment[e] += loads.moment(x) * (2.0 * w);
            }
        }
        Self { nodal, moment }
    }
}

fn membrane_gradient(v: &[Vec3], nodes: &[usize; 4], dn: &[[f64; 2]; 4]) -> Mat3x2 {
    let mut f = Mat3x2::zeros();
    for a in 0..4 {
        for r in 0..3 {
            f[(r, 0)] += v[nodes[a]][r] * dn[a][0];
            f[(r, 1)] += v[nodes[a]][r] * dn[a][1];
        }
    }
    f
}

fn limit_energy_impl(
    source: &dyn DensitySource,
    mesh: &PlateMesh,
    loads: &LimitLoads,
    v: &[Vec3],
    bbar: &[Vec3],
    mut grad: Option<(&mut [Vec3], &mut [Vec3])>,
) -> Result<f64, GammaError> {
    let mut bulk = 0.0;
    for e in 0..mesh.element_count() {
        let nodes = mesh.element_nodes(e);
        for (x, w, _, dn) in mesh.gauss(e) {
            let f = membrane_gradient(v, &nodes, &dn);
            let (q, s) = source.density(x, &f, &bbar[e])?;
            bulk += 2.0 * w * q;
            if let Some((gv, gb)) = grad.as_mut() {
                for a in 0..4 {
                    let d = Vector2::new(dn[a][0], dn[a][1]);
                    gv[nodes[a]] += s.fixed_columns::<2>(0) * d * (2.0 * w);
                }
                gb[e] += s.column(2) * (2.0 * w);
            }
        }
    }
    let mut work = 0.0;
    for (l, u) in loads.nodal.iter().zip(v) {
        work += l.dot(u);
    }
    for (m, b) in loads.moment.iter().zip(bbar) {
        work += m.dot(b);
    }
    if let Some((gv, gb)) = grad {
        for (g, l) in gv.iter_mut().zip(&loads.nodal) {
            *g -= l;
        }
        for (g, m) in gb.iter_mut().zip(&loads.moment) {
            *g -= m;
        }
    }
    Ok(bulk - work)
}

/// `J(v, b̄)` for nodal `v` and element-wise constant `b̄`.
pub fn limit_membrane_energy(
    source: &dyn DensitySource,
    mesh: &PlateMesh,
    loads: &LoadSystem,
    v: &[Vec3],
    bbar: &[Vec3],
) -> Result<f64, GammaError> {
    if v.len() != mesh.node_count() || bbar.len() != mesh.element_count() {
        return Err(GammaError::InvalidProblem(
            "v needs one value per node and b̄ one per element".into(),
        ));
    }
    limit_energy_impl(source, mesh, &LimitLoads::new(mesh, loads), v, bbar, None)
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitSolution {
    pub energy: f64,
    #[serde(skip)]
    pub v: Vec<Vec3>,
    /// One vector per element.
    #[serde(skip)]
    pub bbar: Vec<Vec3>,
    pub iterations: usize,
}

/// Minimizes `J` over `v` clamped to `F̄_bc x_α` on `∂ω` and element-wise
/// constant `b̄`, from the affine `v` and `b̄ = 0`.
pub fn minimize_limit(problem: &ThinFilmProblem, source: &dyn DensitySource) -> Result<LimitSolution, GammaError> {
    problem.validate()?;
    if source.eliminates_z() && problem.loads.has_moment() {
        return Err(GammaError::InvalidProblem(
            "a membrane density cannot carry order-one surface loads; use a Cosserat source".into(),
        ));
    }
    let mesh = problem.plate();
    let loads = LimitLoads::new(&mesh, &problem.loads);
    let free: Vec<usize> = (0..mesh.node_count()).filter(|i| !mesh.is_boundary(*i)).collect();
    let ne = mesh.element_count();
    let with_b = !source.eliminates_z();
    let mut v: Vec<Vec3> = (0..mesh.node_count())
        .map(|i| {
            let x = mesh.node_coords(i);
            problem.f_bc * Vector2::new(x[0], x[1])
        })
        .collect();
    let mut x0 = Vec::with_capacity(3 * (free.len() + ne));
    for i in &free {
        x0.extend(v[*i].iter());
    }
    if with_b {
        x0.extend(std::iter::repeat(0.0).take(3 * ne));
    }
    let nv = 3 * free.len();
    let mut bbar = vec![Vec3::zeros(); ne];
    let mut gv = vec![Vec3::zeros(); mesh.node_count()];
    let mut gb = vec![Vec3::zeros(); ne];
    let settings = DescentSettings {
        max_iter: 500,
        grad_tol: problem.inner.grad_tol.max(1e-7),
        memory: 8,
    };
    let r = lbfgs(
        |x: &[f64], g: &mut [f64]| {
            for (k, i) in free.iter().enumerate() {
                v[*i] = Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
            }
            if with_b {
                for e in 0..ne {
                    bbar[e] = Vec3::new(x[nv + 3 * e], x[nv + 3 * e + 1], x[nv + 3 * e + 2]);
                }
            }
            gv.iter_mut().for_each(|t| *t = Vec3::zeros());
            gb.iter_mut().for_each(|t| *t = Vec3::zeros());
            let val = limit_energy_impl(source, &mesh, &loads, &v, &bbar, Some((&mut gv, &mut gb)))?;
            for (k, i) in free.iter().enumerate() {
                g[3 * k..3 * k + 3].copy_from_slice(gv[*i].as_slice());
            }
            if with_b {
                for e in 0..ne {
                    g[nv + 3 * e..nv + 3 * e + 3].copy_from_slice(gb[e].as_slice());
                }
            }
            Ok::<_, GammaError>(val)
        },
        x0,
        &settings,
    )?;
    if !r.is_acceptable() {
        return Err(GammaError::NotConverged {
            best_value: r.value,
            epsilon: None,
        });
    }
    for (k, i) in free.iter().enumerate() {
        v[*i] = Vec3::new(r.x[3 * k], r.x[3 * k + 1], r.x[3 * k + 2]);
    }
    if with_b {
        for e in 0..ne {
            bbar[e] = Vec3::new(r.x[nv + 3 * e], r.x[nv + 3 * e + 1], r.x[nv + 3 * e + 2]);
        }
    }
    Ok(LimitSolution {
        energy: r.value,
        v,
        bbar,
        iterations: r.iterations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub energy: f64,
    /// `(energy − limit)/|limit|`, or `energy − limit` when the limit vanishes.
    pub gap: f64,
    pub iterations: usize,
    pub seconds: f64,
    pub bbar_norm: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub limit_energy: f64,
    pub limit_iterations: usize,
    pub limit_seconds: f64,
    pub limit_failure: Option<String>,
}

impl ConvergenceReport {
    pub fn is_complete(&self) -> bool {
        self.limit_failure.is_none() && self.rows.iter().all(|r| r.failure.is_none())
    }

    /// Whether `|gap|` never increases as `ε` decreases, up to `slack`.
    pub fn gaps_monotone(&self, slack: f64) -> bool {
        self.rows
            .windows(2)
            .all(|p| p[1].gap.abs() <= p[0].gap.abs() + slack)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), std::io::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epsilon", "energy", "gap", "iterations", "seconds"])?;
        for r in &self.rows {
            out.write_record([
                r.epsilon.to_string(),
                r.energy.to_string(),
                r.gap.to_string(),
                r.iterations.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        out.flush()
    }
}

fn gap(energy: f64, limit: f64) -> f64 {
    if limit != 0.0 {
        (energy - limit) / limit.abs()
    } else {
        energy - limit
    }
}

/// Minimizes at every thickness and compares with the minimized limit
/// functional. Failures are recorded per row instead of aborting the study.
pub fn convergence_study(
    problem: &ThinFilmProblem,
    source: &dyn DensitySource,
) -> Result<ConvergenceReport, GammaError> {
    problem.validate()?;
    let t = Instant::now();
    let (limit_energy, limit_iterations, limit_failure) = match minimize_limit(problem, source) {
        Ok(s) => (s.energy, s.iterations, None),
        Err(e) => (f64::NAN, 0, Some(e.to_string())),
    };
    let limit_seconds = t.elapsed().as_secs_f64();
    let rows = problem
        .epsilons
        .par_iter()
        .map(|&eps| {
            let t = Instant::now();
            match minimize_thin_film(problem, eps) {
                Ok(s) => ConvergenceRow {
                    epsilon: eps,
                    energy: s.energy,
                    gap: gap(s.energy, limit_energy),
                    iterations: s.iterations,
                    seconds: t.elapsed().as_secs_f64(),
                    bbar_norm: s.bbar_norm,
                    failure: None,
                },
                Err(e) => ConvergenceRow {
                    epsilon: eps,
                    energy: f64::NAN,
                    gap: f64::NAN,
                    iterations: 0,
                    seconds: t.elapsed().as_secs_f64(),
                    bbar_norm: f64::NAN,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ConvergenceReport {
        rows,
        limit_energy,
        limit_iterations,
        limit_seconds,
        limit_failure,
    })
}

/// Cell energy `∫ W(x₀, x₃; F̄ + D_αφ | s D₃φ)` of a lateral-zero cell field
/// with in-plane point frozen, for comparison with [`scaled_energy`] of the
/// tiled field.
pub fn cell_energy(
    w: &StoredEnergyDensity,
    x_alpha: [f64; 2],
    f_bar: &Mat3x2,
    cell: &DiscreteField,
    scale: f64,
) -> Result<f64, GammaError> {
    Ok(crate::field::energy_integral(
        w,
        cell,
        scale,
        1.0,
        XMode::Frozen { x_alpha },
        join(f_bar, &Vec3::zeros()),
    )?)
}
