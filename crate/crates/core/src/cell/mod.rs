//! Cell problems for the effective densities.
//!
//! * [`membrane_density`]: `½∫ W(x₀, x₃; F̄ + D_αφ | L D₃φ)` minimized over
//!   `L > 0` and `φ` vanishing on the lateral faces of `(0,1)² × (−1,1)`;
//! * [`membrane_density_periodic`]: the same with laterally periodic `φ` and
//!   the quasiconvexified integrand;
//! * [`cosserat_density`]: laterally periodic `φ` with `(L/2)∫D₃φ = z`;
//! * [`minimize_over_z`]: the Cosserat density minimized over `z`.
//!
//! `x₃`-dependence of the energy is resolved inside the cell; `x_α` is frozen
//! at `x₀`.

mod lsearch;
mod quasiconvex;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descent::{lbfgs, DescentSettings};
use crate::field::{
    BoundaryMode, CellMesh, DiscreteField, DofMap, Domain, EnergyAssembler, FieldError, QuadratureRule, XMode,
};
use crate::integrand::{join, IntegrandError, Mat3, Mat3x2, MaterialPoint, PointEnergy, StoredEnergyDensity, Vec3};

pub use lsearch::{LProfilePoint, LSearchConfig};
use lsearch::{search, InnerResult};
pub use quasiconvex::{
    lamination_base, lamination_upper_bound, quasiconvexify, symmetric_wells, LaminationBound,
    QuasiconvexSurrogate,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("invalid cell problem: {0}")]
    InvalidSpec(String),
    #[error("inner minimization did not converge (best value {best_value}, L = {l:?})")]
    NotConverged { best_value: f64, l: Option<f64> },
    #[error("value {value} violates the growth bound {bound}")]
    BoundViolation { value: f64, bound: f64 },
    #[error(transparent)]
    Integrand(#[from] IntegrandError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// `|a − b| <= tol · max(1, |a|, |b|)`.
pub fn within(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct InnerSolverConfig {
    pub max_iter: usize,
    /// Stop when `|g| <= grad_tol (1 + |E|)`.
    pub grad_tol: f64,
    pub memory: usize,
    /// Starts per inner solve for nonconvex energies (zero, lift, random).
    pub multistart: usize,
    pub seed: u64,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            grad_tol: 1e-8,
            memory: 12,
            multistart: 3,
            seed: 0,
        }
    }
}

impl InnerSolverConfig {
    pub fn descent(&self) -> DescentSettings {
        DescentSettings {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            memory: self.memory,
        }
    }

    fn validate(&self) -> Result<(), CellError> {
        if self.max_iter == 0 || !(self.grad_tol > 0.0) || self.memory == 0 || self.multistart == 0 {
            return Err(CellError::InvalidSpec(
                "inner solver needs max_iter, memory, multistart >= 1 and grad_tol > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A solution used to start the search on another (finer) mesh.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub l: f64,
    pub field: DiscreteField,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellProblemSpec {
    pub x0: MaterialPoint,
    pub f_bar: Mat3x2,
    pub z: Option<Vec3>,
    /// Cell counts and domain; each operation sets the boundary mode it needs.
    pub mesh: CellMesh,
    pub l_search: LSearchConfig,
    pub inner: InnerSolverConfig,
    /// Relative value tolerance.
    pub tol: f64,
    #[serde(skip)]
    pub warm_start: Option<WarmStart>,
}

impl CellProblemSpec {
    pub fn new(x0: MaterialPoint, f_bar: Mat3x2) -> Self {
        Self {
            x0,
            f_bar,
            z: None,
            mesh: CellMesh::unit_cell(8, BoundaryMode::LateralZero).expect("valid mesh"),
            l_search: LSearchConfig::default(),
            inner: InnerSolverConfig::default(),
            tol: 1e-4,
            warm_start: None,
        }
    }

    pub fn with_z(mut self, z: Vec3) -> Self {
        self.z = Some(z);
        self
    }

    pub fn without_z(mut self) -> Self {
        self.z = None;
        self
    }

    pub fn with_cells(mut self, n: usize) -> Result<Self, CellError> {
        self.mesh = CellMesh::unit_cell(n, *self.mesh.boundary())?;
        Ok(self)
    }

    pub fn with_mesh(mut self, mesh: CellMesh) -> Self {
        self.mesh = mesh;
        self
    }

    pub fn with_l_search(mut self, l: LSearchConfig) -> Self {
        self.l_search = l;
        self
    }

    pub fn with_inner(mut self, inner: InnerSolverConfig) -> Self {
        self.inner = inner;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<(), CellError> {
        if *self.mesh.domain() != Domain::UnitCell {
            return Err(CellError::InvalidSpec("cell problems need a unit-cell mesh".into()));
        }
        if !(self.tol > 0.0) {
            return Err(CellError::InvalidSpec("tolerance must be positive".into()));
        }
        if self.f_bar.iter().chain(self.z.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(CellError::InvalidSpec("F̄ and z must be finite".into()));
        }
        self.l_search.validate()?;
        self.inner.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefinementStep {
    pub cells: [usize; 3],
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CellDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Energy of the unperturbed (affine-lift) field.
    pub upper_bound: f64,
    pub profile: Vec<LProfilePoint>,
    pub flat_profile: bool,
    /// The grid minimum sits at an end of the `L` range.
    pub boundary_warning: bool,
    pub starts: usize,
    /// The integrand was the quasiconvex surrogate rather than `W`.
    pub surrogate: bool,
    pub refinement: Vec<RefinementStep>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSolution {
    pub value: f64,
    pub l_star: Option<f64>,
    #[serde(skip)]
    pub field: DiscreteField,
    /// Derivative of `value` with respect to `(F̄ | z)` (or `F` for the cube).
    pub dual: Mat3,
    pub diagnostics: CellDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellOp {
    Membrane,
    MembranePeriodic,
    Cosserat,
}

/// One cell problem with fixed integrand and boundary treatment.
struct Problem<'a> {
    spec: &'a CellProblemSpec,
    asm: EnergyAssembler<'a>,
    dofs: DofMap,
    z: Option<Vec3>,
    /// Pointwise transverse minimizers per element layer, for lifted starts.
    fiber: Vec<Vec3>,
    multistart: bool,
    starts_used: usize,
    /// Layer index of every free node, for laterally periodic meshes.
    layers: Option<Vec<usize>>,
}

impl<'a> Problem<'a> {
    fn new(
        w: &'a StoredEnergyDensity,
        energy: &'a dyn PointEnergy,
        spec: &'a CellProblemSpec,
        boundary: BoundaryMode,
        multistart: bool,
    ) -> Result<Self, CellError> {
        spec.validate()?;
        let mesh = spec.mesh.with_boundary(boundary);
        let z = if boundary == BoundaryMode::LateralPeriodic { spec.z } else { None };
        let offset = join(&spec.f_bar, &z.unwrap_or_else(Vec3::zeros));
        let asm = EnergyAssembler::with_point_energy(
            &mesh,
            &QuadratureRule::gauss2(),
            w,
            energy,
            XMode::Frozen { x_alpha: spec.x0.x_alpha },
            1.0,
            0.5,
        )?
        .with_offset(offset);
        let mut dofs = DofMap::new(&mesh);
        if z.is_some() {
            dofs = dofs.with_zero_mean_jump()?;
        }
        let fiber = if multistart {
            let h = mesh.spacing()[2];
            (0..mesh.n()[2])
                .map(|k| {
                    let x3 = -1.0 + h * (k as f64 + 0.5);
                    w.fiber_infimum(&spec.x0.with_x3(x3), &spec.f_bar).map(|f| f.z)
                })
                .collect::<Result<_, _>>()?
        } else {
            vec![]
        };
        let layers = (boundary == BoundaryMode::LateralPeriodic).then(|| {
            let mut layers = vec![0; dofs.len() / 3];
            for idx in 0..mesh.node_count() {
                if mesh.canonical_node(idx) == idx {
                    let d = dofs.restrict_index(idx).expect("periodic nodes are free");
                    layers[d] = mesh.node_ijk(idx)[2];
                }
            }
            layers
        });
        Ok(Self {
            spec,
            asm,
            dofs,
            z,
            fiber,
            multistart,
            starts_used: 0,
            layers,
        })
    }

    fn mesh(&self) -> &CellMesh {
        self.asm.mesh()
    }

    /// `φ` with `L D₃φ ≈ z*(x₃) − z` layer by layer.
    fn lift_start(&self, l: f64) -> Vec<f64> {
        let mesh = self.mesh();
        let h = mesh.spacing()[2];
        let z = self.z.unwrap_or_else(Vec3::zeros);
        let mut column = vec![Vec3::zeros(); mesh.n()[2] + 1];
        for k in 0..mesh.n()[2] {
            column[k + 1] = column[k] + (self.fiber[k] - z) * (h / l);
        }
        let field = DiscreteField::from_fn(mesh, |x| {
            let k = (((x[2] + 1.0) / h).round() as usize).min(mesh.n()[2]);
            column[k]
        });
        self.dofs.restrict(field.values())
    }

    fn random_start(&self, l: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.inner.seed ^ l.to_bits());
        let scale = self.spec.f_bar.norm().max(self.z.map_or(0.0, |z| z.norm())).max(1.0);
        let amp = 0.1 * self.mesh().spacing()[0] * scale;
        (0..self.dofs.len()).map(|_| amp * rng.random_range(-1.0..1.0)).collect()
    }

    /// Minimizes over laterally constant fields. The frozen-`x_α` integrand is
    /// laterally homogeneous, so for convex energies this is the full
    /// minimizer; its conditioning does not degrade as `L → 0`.
    fn column_solve(&self, layers: &[usize], warm: Option<&[f64]>) -> Result<(Vec<f64>, usize), CellError> {
        let nl = self.mesh().n()[2] + 1;
        let broadcast = |xc: &[f64], out: &mut [f64]| {
            for (d, k) in layers.iter().enumerate() {
                out[3 * d..3 * d + 3].copy_from_slice(&xc[3 * k..3 * k + 3]);
            }
        };
        let mut xc0 = vec![0.0; 3 * nl];
        if let Some(x) = warm {
            let mut count = vec![0.0; nl];
            for (d, k) in layers.iter().enumerate() {
                count[*k] += 1.0;
                for r in 0..3 {
                    xc0[3 * k + r] += x[3 * d + r];
                }
            }
            for k in 0..nl {
                for r in 0..3 {
                    xc0[3 * k + r] /= count[k];
                }
            }
        }
        let mut reduced = self.asm.reduced(&self.dofs);
        let mut x = vec![0.0; self.dofs.len()];
        let mut g = vec![0.0; self.dofs.len()];
        let r = lbfgs(
            |xc: &[f64], gc: &mut [f64]| {
                broadcast(xc, &mut x);
                let e = reduced.eval(&x, &mut g)?;
                gc.iter_mut().for_each(|v| *v = 0.0);
                for (d, k) in layers.iter().enumerate() {
                    for r in 0..3 {
                        gc[3 * k + r] += g[3 * d + r];
                    }
                }
                Ok::<_, CellError>(e)
            },
            xc0,
            &self.spec.inner.descent(),
        )?;
        let mut out = vec![0.0; self.dofs.len()];
        broadcast(&r.x, &mut out);
        Ok((out, r.iterations))
    }

    fn solve(&mut self, l: f64, warm: Option<&[f64]>) -> Result<InnerResult, CellError> {
        self.asm.set_scale(l);
        let mut starts: Vec<Vec<f64>> = Vec::new();
        let mut column_iterations = 0;
        if let Some(layers) = &self.layers {
            let (x, it) = self.column_solve(layers, warm)?;
            column_iterations = it;
            starts.push(x);
            if self.multistart {
                if let Some(x) = warm {
                    starts.push(x.to_vec());
                }
            }
        } else {
            if let Some(x) = warm {
                starts.push(x.to_vec());
            }
            if self.multistart || warm.is_none() {
                starts.push(vec![0.0; self.dofs.len()]);
            }
        }
        if self.multistart {
            let extra = self.spec.inner.multistart.saturating_sub(1);
            if extra >= 1 {
                starts.push(self.lift_start(l));
            }
            if extra >= 2 {
                starts.push(self.random_start(l));
            }
        }
        self.starts_used = self.starts_used.max(starts.len());
        let settings = self.spec.inner.descent();
        let mut reduced = self.asm.reduced(&self.dofs);
        let mut best: Option<InnerResult> = None;
        let mut iterations = 0;
        for x0 in starts {
            let r = lbfgs(|x: &[f64], g: &mut [f64]| reduced.eval(x, g), x0, &settings)?;
            iterations += r.iterations;
            if best.as_ref().map_or(true, |b| r.value < b.value) {
                best = Some(InnerResult {
                    value: r.value,
                    converged: r.is_acceptable(),
                    grad_norm: r.grad_norm,
                    x: r.x,
                    iterations: 0,
                });
            }
        }
        let mut best = best.expect("at least one start");
        best.iterations = iterations + column_iterations;
        Ok(best)
    }

    fn nodal(&self, x: &[f64]) -> Vec<Vec3> {
        let mut u = vec![Vec3::zeros(); self.mesh().node_count()];
        self.dofs.expand(x, &mut u);
        u
    }

    /// The full field `φ`, including `x₃ z / L` when `z` is prescribed.
    fn field(&self, x: &[f64], l: f64) -> Result<DiscreteField, CellError> {
        let mut u = self.nodal(x);
        if let Some(z) = self.z {
            for (idx, v) in u.iter_mut().enumerate() {
                *v += z * (self.mesh().node_coords(idx)[2] / l);
            }
        }
        let f = DiscreteField::from_values(self.mesh(), u)?;
        Ok(match self.z {
            Some(z) => f.with_target(z),
            None => f,
        })
    }

    fn unknowns_from_field(&self, field: &DiscreteField, l: f64) -> Result<Vec<f64>, CellError> {
        let fine = field.inject(self.mesh())?;
        let mut u = fine.values().to_vec();
        if let Some(z) = self.z {
            for (idx, v) in u.iter_mut().enumerate() {
                *v -= z * (self.mesh().node_coords(idx)[2] / l);
            }
        }
        Ok(self.dofs.restrict(&u))
    }

    fn run(mut self, surrogate: bool) -> Result<CellSolution, CellError> {
        let zero = vec![0.0; self.dofs.len()];
        let upper = self.asm.reduced(&self.dofs).value(&zero)?;
        let seed = match &self.spec.warm_start {
            Some(ws) => Some((ws.l, self.unknowns_from_field(&ws.field, ws.l)?)),
            None => None,
        };
        let spec = self.spec;
        let outcome = search(&spec.l_search, spec.tol, seed, |l, start| self.solve(l, start))?;
        let (l, mut best) = (outcome.l, outcome.best);
        if !best.converged {
            return Err(CellError::NotConverged {
                best_value: best.value,
                l: Some(l),
            });
        }
        if best.value > upper {
            best.value = upper;
            best.x = zero;
        }
        self.asm.set_scale(l);
        let dual = self.asm.stress_integral(&self.nodal(&best.x))?;
        let field = self.field(&best.x, l)?;
        Ok(CellSolution {
            value: best.value,
            l_star: Some(l),
            field,
            dual,
            diagnostics: CellDiagnostics {
                iterations: outcome.profile.iter().map(|p| p.iterations).sum(),
                grad_norm: best.grad_norm,
                converged: true,
                upper_bound: upper,
                profile: outcome.profile,
                flat_profile: outcome.flat,
                boundary_warning: outcome.boundary_warning,
                starts: self.starts_used,
                surrogate,
                refinement: vec![],
            },
        })
    }
}

/// Membrane density with laterally clamped perturbations.
pub fn membrane_density(w: &StoredEnergyDensity, spec: &CellProblemSpec) -> Result<CellSolution, CellError> {
    if spec.z.is_some() {
        return Err(CellError::InvalidSpec("membrane density takes no Cosserat vector".into()));
    }
    let p = Problem::new(w, w.base(), spec, BoundaryMode::LateralZero, !w.is_convex())?;
    p.run(false)
}

/// Membrane density with laterally periodic perturbations of the
/// quasiconvexified integrand. Convex energies are used directly.
pub fn membrane_density_periodic(
    w: &StoredEnergyDensity,
    spec: &CellProblemSpec,
) -> Result<CellSolution, CellError> {
    if w.is_convex() {
        let spec = spec.clone().without_z();
        return Problem::new(w, w.base(), &spec, BoundaryMode::LateralPeriodic, false)?.run(false);
    }
    let qw = QuasiconvexSurrogate::new(w.base(), &spec.inner)?;
    membrane_density_periodic_with(w, spec, &qw)
}

/// [`membrane_density_periodic`] with a caller-owned surrogate cache.
pub fn membrane_density_periodic_with(
    w: &StoredEnergyDensity,
    spec: &CellProblemSpec,
    qw: &QuasiconvexSurrogate,
) -> Result<CellSolution, CellError> {
    let spec = spec.clone().without_z();
    Problem::new(w, qw, &spec, BoundaryMode::LateralPeriodic, false)?.run(!w.is_convex())
}

/// Cosserat density `Q*W(x₀; F̄ | z)`.
pub fn cosserat_density(w: &StoredEnergyDensity, spec: &CellProblemSpec) -> Result<CellSolution, CellError> {
    if w.is_convex() {
        return cosserat_impl(w, w.base(), spec, false);
    }
    let qw = QuasiconvexSurrogate::new(w.base(), &spec.inner)?;
    cosserat_impl(w, &qw, spec, true)
}

/// [`cosserat_density`] with a caller-owned surrogate cache.
pub fn cosserat_density_with(
    w: &StoredEnergyDensity,
    spec: &CellProblemSpec,
    qw: &QuasiconvexSurrogate,
) -> Result<CellSolution, CellError> {
    if w.is_convex() {
        cosserat_impl(w, w.base(), spec, false)
    } else {
        cosserat_impl(w, qw, spec, true)
    }
}

fn cosserat_impl(
    w: &StoredEnergyDensity,
    energy: &dyn PointEnergy,
    spec: &CellProblemSpec,
    surrogate: bool,
) -> Result<CellSolution, CellError> {
    let z = spec
        .z
        .ok_or_else(|| CellError::InvalidSpec("Cosserat density needs z".into()))?;
    let sol = Problem::new(w, energy, spec, BoundaryMode::LateralPeriodic, false)?.run(surrogate)?;
    let (_, hi) = w.growth().effective_bounds(spec.f_bar.norm(), z.norm());
    if sol.value > hi + spec.tol * hi.abs().max(1.0) || sol.value < -spec.tol {
        return Err(CellError::BoundViolation {
            value: sol.value,
            bound: hi,
        });
    }
    Ok(sol)
}

/// `min_z Q*W(x₀; F̄ | z)` and the minimizing vector `b₀`.
///
/// Among evaluated vectors whose values agree with the minimum to `1e-12`
/// relative, the one of smallest norm is returned.
pub fn minimize_over_z(
    w: &StoredEnergyDensity,
    spec: &CellProblemSpec,
) -> Result<(CellSolution, Vec3), CellError> {
    let qw = QuasiconvexSurrogate::new(w.base(), &spec.inner)?;
    minimize_over_z_with(w, spec, &qw)
}

/// [`minimize_over_z`] with a caller-owned surrogate cache.
pub fn minimize_over_z_with(
    w: &StoredEnergyDensity,
    spec: &CellProblemSpec,
    qw: &QuasiconvexSurrogate,
) -> Result<(CellSolution, Vec3), CellError> {
    if spec.z.is_some() {
        return Err(CellError::InvalidSpec("minimize_over_z takes no Cosserat vector".into()));
    }
    spec.validate()?;
    // start from the through-thickness mean of the pointwise transverse minimizers
    let gauss = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
    let weights = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
    let mut z0 = Vec3::zeros();
    for (t, wt) in gauss.iter().zip(weights) {
        z0 += w.fiber_infimum(&spec.x0.with_x3(*t), &spec.f_bar)?.z * (0.5 * wt);
    }

    let mut evaluated: Vec<(Vec3, CellSolution)> = Vec::new();
    let settings = DescentSettings {
        max_iter: 200,
        grad_tol: spec.inner.grad_tol.max(1e-7),
        memory: 6,
    };
    let result = lbfgs(
        |zs: &[f64], g: &mut [f64]| {
            let z = Vec3::new(zs[0], zs[1], zs[2]);
            let mut s = spec.clone().with_z(z);
            s.warm_start = evaluated
                .iter()
                .min_by(|a, b| a.1.value.total_cmp(&b.1.value))
                .and_then(|(_, sol)| sol.l_star.map(|l| WarmStart { l, field: sol.field.clone() }));
            let sol = cosserat_density_with(w, &s, qw)?;
            for i in 0..3 {
                g[i] = sol.dual[(i, 2)];
            }
            let v = sol.value;
            evaluated.push((z, sol));
            Ok::<_, CellError>(v)
        },
        z0.as_slice().to_vec(),
        &settings,
    )?;
    if !result.is_acceptable() {
        return Err(CellError::NotConverged {
            best_value: result.value,
            l: None,
        });
    }
    let best = evaluated
        .iter()
        .map(|(_, s)| s.value)
        .fold(f64::INFINITY, f64::min);
    let pick = evaluated
        .iter()
        .filter(|(_, s)| s.value <= best + 1e-12 * best.abs().max(1.0))
        .min_by(|a, b| a.0.norm().total_cmp(&b.0.norm()))
        .expect("at least one evaluation");
    let (b0, mut sol) = (pick.0, pick.1.clone());
    sol.diagnostics.iterations = evaluated.iter().map(|(_, s)| s.diagnostics.iterations).sum();
    Ok((sol, b0))
}

/// Solves on `levels` nested meshes, each started from the previous solution
/// injected into the refined mesh, so values cannot increase beyond descent
/// tolerance.
pub fn refinement_sequence(
    op: CellOp,
    w: &StoredEnergyDensity,
    spec: &CellProblemSpec,
    levels: usize,
) -> Result<Vec<CellSolution>, CellError> {
    let mut out: Vec<CellSolution> = Vec::with_capacity(levels);
    let mut s = spec.clone();
    let qw = QuasiconvexSurrogate::new(w.base(), &spec.inner)?;
    for level in 0..levels {
        if level > 0 {
            let prev = out.last().expect("previous level");
            s.mesh = s.mesh.refine();
            s.warm_start = prev.l_star.map(|l| WarmStart {
                l,
                field: prev.field.clone(),
            });
        }
        let sol = match op {
            CellOp::Membrane => membrane_density(w, &s)?,
            CellOp::MembranePeriodic => membrane_density_periodic_with(w, &s, &qw)?,
            CellOp::Cosserat => cosserat_density_with(w, &s, &qw)?,
        };
        out.push(sol);
    }
    let history: Vec<RefinementStep> = out
        .iter()
        .map(|s| RefinementStep {
            cells: s.field.mesh().n(),
            value: s.value,
        })
        .collect();
    for (i, s) in out.iter_mut().enumerate() {
        s.diagnostics.refinement = history[..=i].to_vec();
    }
    Ok(out)
}
