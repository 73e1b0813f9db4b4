//! Upper bounds for the quasiconvex envelope: first-order laminates and
//! discrete cell minimization on the unit cube, plus a cached surrogate that
//! combines them.

use std::collections::HashMap;
use std::sync::RwLock;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CellDiagnostics, CellError, CellSolution, InnerSolverConfig};
use crate::descent::{golden_section, lbfgs, DescentSettings};
use crate::field::{BoundaryMode, CellMesh, DiscreteField, DofMap, Domain, EnergyAssembler, QuadratureRule, XMode};
use crate::integrand::{
    BaseEnergy, IntegrandError, Mat3, MaterialPoint, PointEnergy, StoredEnergyDensity, Vec3,
};

/// Result of the laminate search. `F + (1−λ) a⊗n` occupies volume fraction
/// `λ` and `F − λ a⊗n` the rest.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LaminationBound {
    pub value: f64,
    pub lambda: f64,
    pub a: Vec3,
    pub n: Vec3,
    /// Derivative of the bound with respect to `F`.
    pub stress: Mat3,
    /// False when no laminate beats the unrelaxed energy.
    pub improved: bool,
}

const LAMBDA_GRID: usize = 20;
const SPHERE_POINTS: usize = 24;

fn unit_axes() -> [Vec3; 3] {
    [Vec3::x(), Vec3::y(), Vec3::z()]
}

/// Unit normals on the upper hemisphere, roughly uniform.
fn sphere_grid(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * k as f64;
            Vec3::new(r * t.cos(), r * t.sin(), z)
        })
        .collect()
}

fn push_unique(list: &mut Vec<Vec3>, n: Vec3) {
    let n = n.normalize();
    if !list.iter().any(|m| (m - n).norm() < 1e-9 || (m + n).norm() < 1e-9) {
        list.push(n);
    }
}

fn candidate_normals(base: &BaseEnergy, normal: Option<Vec3>) -> Vec<Vec3> {
    let mut out = Vec::new();
    if let Some(n) = normal {
        push_unique(&mut out, n);
        return out;
    }
    for (_, n) in base.rank_one_connections() {
        push_unique(&mut out, n);
    }
    for n in unit_axes() {
        push_unique(&mut out, n);
    }
    for n in sphere_grid(SPHERE_POINTS) {
        push_unique(&mut out, n);
    }
    out
}

fn laminate_energy(
    w: &BaseEnergy,
    f: &Mat3,
    n: &Vec3,
    lambda: f64,
    a: &Vec3,
) -> (f64, Vec3, Mat3) {
    let (e1, s1) = w.energy_stress(&(f + a * n.transpose() * (1.0 - lambda)));
    let (e2, s2) = w.energy_stress(&(f - a * n.transpose() * lambda));
    let value = lambda * e1 + (1.0 - lambda) * e2;
    let grad = (s1 - s2) * n * (lambda * (1.0 - lambda));
    (value, grad, s1 * lambda + s2 * (1.0 - lambda))
}

/// `min_a λ w(F + (1−λ)a⊗n) + (1−λ) w(F − λa⊗n)` from several starts.
fn best_amplitude(w: &BaseEnergy, f: &Mat3, n: &Vec3, lambda: f64, starts: &[Vec3]) -> (f64, Vec3) {
    let settings = DescentSettings {
        max_iter: 200,
        grad_tol: 1e-12,
        memory: 6,
    };
    let mut best = (f64::INFINITY, Vec3::zeros());
    for a0 in starts {
        let r = lbfgs(
            |a: &[f64], g: &mut [f64]| {
                let (v, gr, _) = laminate_energy(w, f, n, lambda, &Vec3::new(a[0], a[1], a[2]));
                g.copy_from_slice(gr.as_slice());
                Ok::<_, std::convert::Infallible>(v)
            },
            a0.as_slice().to_vec(),
            &settings,
        )
        .unwrap_or_else(|e| match e {});
        if r.value < best.0 {
            best = (r.value, Vec3::new(r.x[0], r.x[1], r.x[2]));
        }
    }
    best
}

/// First-order laminate bound for the base energy `w` at `F`.
pub fn lamination_base(w: &BaseEnergy, f: &Mat3, normal: Option<Vec3>) -> LaminationBound {
    let (w0, s0) = w.energy_stress(f);
    let unimproved = LaminationBound {
        value: w0,
        lambda: 1.0,
        a: Vec3::zeros(),
        n: normal.map_or(Vec3::x(), |n| n.normalize()),
        stress: s0,
        improved: false,
    };
    if w.is_convex() {
        return unimproved;
    }
    let wells = w.well_centers();
    let normals = candidate_normals(w, normal);
    // (value, normal index, lambda, a)
    let mut best: Option<(f64, usize, f64, Vec3)> = None;
    for (k, n) in normals.iter().enumerate() {
        let mut seeds = vec![Vec3::zeros()];
        for i in 0..wells.len() {
            for j in 0..wells.len() {
                if i != j {
                    seeds.push((wells[i] - wells[j]) * n);
                }
            }
        }
        let mut warm: Option<Vec3> = None;
        for step in 1..LAMBDA_GRID {
            let lambda = step as f64 / LAMBDA_GRID as f64;
            let mut starts = seeds.clone();
            if let Some(a) = warm {
                starts.push(a);
            }
            let (v, a) = best_amplitude(w, f, n, lambda, &starts);
            warm = Some(a);
            if best.map_or(true, |b| v < b.0) {
                best = Some((v, k, lambda, a));
            }
        }
    }
    let Some((_, k, lambda0, a0)) = best else {
        return unimproved;
    };
    let n = normals[k];
    let mut a_best = a0;
    let mut v_best = f64::INFINITY;
    let mut l_best = lambda0;
    let h = 1.0 / LAMBDA_GRID as f64;
    let _ = golden_section(
        |lambda| {
            let (v, a) = best_amplitude(w, f, &n, lambda, &[a0, a_best]);
            if v < v_best {
                v_best = v;
                a_best = a;
                l_best = lambda;
            }
            Ok::<_, std::convert::Infallible>(v)
        },
        (lambda0 - h).max(0.0),
        (lambda0 + h).min(1.0),
        1e-7,
    );
    let (v0, _) = best_amplitude(w, f, &n, lambda0, &[a0]);
    if v0 <= v_best {
        v_best = v0;
        l_best = lambda0;
        a_best = a0;
    }
    if v_best >= w0 {
        return unimproved;
    }
    let (value, _, stress) = laminate_energy(w, f, &n, l_best, &a_best);
    LaminationBound {
        value,
        lambda: l_best,
        a: a_best,
        n,
        stress,
        improved: true,
    }
}

/// Laminate upper bound for `QW(x; F)`; `normal = None` searches the well
/// connections, the coordinate axes and a hemisphere grid.
pub fn lamination_upper_bound(
    w: &StoredEnergyDensity,
    x: &MaterialPoint,
    f: &Mat3,
    normal: Option<Vec3>,
) -> Result<LaminationBound, CellError> {
    let c = w.coefficient(x)?;
    let mut b = lamination_base(w.base(), f, normal);
    b.value *= c;
    b.stress *= c;
    Ok(b)
}

/// A periodic sawtooth laminate along the coordinate axis `axis`, with the
/// interface on a grid plane.
fn laminate_seed(mesh: &CellMesh, axis: usize, lambda: f64, a: &Vec3) -> Option<DiscreteField> {
    let n = mesh.n()[axis];
    let m = ((lambda * n as f64).round() as usize).clamp(1, n - 1);
    let lam = m as f64 / n as f64;
    let (lo, hi) = mesh.domain().bounds();
    let len = hi[axis] - lo[axis];
    Some(DiscreteField::from_fn(mesh, |x| {
        let t = (x[axis] - lo[axis]) / len;
        let s = if t <= lam {
            (1.0 - lam) * t
        } else {
            (1.0 - lam) * lam - lam * (t - lam)
        };
        a * (s * len)
    }))
}

pub(crate) struct CubeSolve {
    pub value: f64,
    pub field: DiscreteField,
    pub stress: Mat3,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub starts: usize,
}

/// `min_φ ∫_Q w(F + Dφ)` over the discrete space of `mesh` (coefficient one).
pub(crate) fn cube_minimize(
    density: &StoredEnergyDensity,
    energy: &dyn PointEnergy,
    f: &Mat3,
    mesh: &CellMesh,
    inner: &InnerSolverConfig,
    laminates: &[LaminationBound],
) -> Result<CubeSolve, CellError> {
    let rule = QuadratureRule::gauss2();
    let point = MaterialPoint::new([0.0, 0.0], 0.0);
    let asm = EnergyAssembler::with_point_energy(mesh, &rule, density, energy, XMode::Point { x: point }, 1.0, 1.0)?
        .with_offset(*f);
    let dofs = DofMap::new(mesh);
    let mut starts = vec![vec![0.0; dofs.len()]];
    if !density.is_convex() {
        for lam in laminates.iter().filter(|l| l.improved) {
            for axis in 0..3 {
                if (lam.n[axis].abs() - 1.0).abs() < 1e-9 {
                    let a = lam.a * lam.n[axis].signum();
                    if let Some(seed) = laminate_seed(mesh, axis, lam.lambda, &a) {
                        starts.push(dofs.restrict(seed.values()));
                    }
                }
            }
        }
        if inner.multistart >= 3 {
            let mut rng = ChaCha8Rng::seed_from_u64(inner.seed ^ 0x9e37_79b9_7f4a_7c15);
            let amp = 0.1 * mesh.spacing()[0] * f.norm().max(1.0);
            starts.push((0..dofs.len()).map(|_| amp * rng.random_range(-1.0..1.0)).collect());
        }
    }
    let settings = inner.descent();
    let mut reduced = asm.reduced(&dofs);
    let mut best: Option<crate::descent::DescentResult> = None;
    let mut iterations = 0;
    for x0 in &starts {
        let r = lbfgs(|x: &[f64], g: &mut [f64]| reduced.eval(x, g), x0.clone(), &settings)?;
        iterations += r.iterations;
        if best.as_ref().map_or(true, |b| r.value < b.value) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    let mut u = vec![Vec3::zeros(); mesh.node_count()];
    dofs.expand(&best.x, &mut u);
    let stress = asm.stress_integral(&u)?;
    Ok(CubeSolve {
        value: best.value,
        field: DiscreteField::from_values(mesh, u)?,
        stress,
        iterations,
        grad_norm: best.grad_norm,
        converged: best.is_acceptable(),
        starts: starts.len(),
    })
}

/// Discrete quasiconvexification of `W(x; ·)` at `F` on the unit cube.
///
/// `mesh` must cover the unit cube; its boundary mode is either periodic
/// (the default characterization used throughout) or all-zero.
pub fn quasiconvexify(
    w: &StoredEnergyDensity,
    x: &MaterialPoint,
    f: &Mat3,
    mesh: &CellMesh,
    inner: &InnerSolverConfig,
) -> Result<CellSolution, CellError> {
    if *mesh.domain() != Domain::UnitCube {
        return Err(CellError::InvalidSpec("quasiconvexify needs a unit-cube mesh".into()));
    }
    if !matches!(mesh.boundary(), BoundaryMode::Periodic | BoundaryMode::AllZero) {
        return Err(CellError::InvalidSpec(
            "quasiconvexify needs periodic or all-zero boundary values".into(),
        ));
    }
    let c = w.coefficient(x)?;
    let base_density = StoredEnergyDensity::new(w.base().clone())?;
    let laminates = if w.is_convex() {
        vec![]
    } else {
        let mut l = vec![lamination_base(w.base(), f, None)];
        for n in unit_axes() {
            l.push(lamination_base(w.base(), f, Some(n)));
        }
        l
    };
    let solve = cube_minimize(&base_density, w.base(), f, mesh, inner, &laminates)?;
    if !solve.converged {
        return Err(CellError::NotConverged {
            best_value: c * solve.value,
            l: None,
        });
    }
    Ok(CellSolution {
        value: c * solve.value,
        l_star: None,
        field: solve.field,
        dual: solve.stress * c,
        diagnostics: CellDiagnostics {
            iterations: solve.iterations,
            grad_norm: solve.grad_norm,
            converged: true,
            upper_bound: c * w.base().energy(f),
            starts: solve.starts,
            ..Default::default()
        },
    })
}

const QUANTUM: f64 = (1u64 << 40) as f64;

fn quantize(f: &Mat3) -> ([i64; 9], Mat3) {
    let mut key = [0i64; 9];
    let mut q = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let k = (f[(i, j)] * QUANTUM).round();
            key[3 * i + j] = k as i64;
            q[(i, j)] = k / QUANTUM;
        }
    }
    (key, q)
}

/// `QW ≈ min(W, laminate bound, discrete cell value)` for the base energy,
/// each term a certified upper bound for the envelope.
///
/// Values are computed at `F` rounded to a fixed binary grid (spacing
/// `2⁻⁴⁰`) and cached, so results do not depend on evaluation order.
pub struct QuasiconvexSurrogate {
    base: BaseEnergy,
    density: StoredEnergyDensity,
    mesh: CellMesh,
    inner: InnerSolverConfig,
    cache: RwLock<HashMap<[i64; 9], (f64, Mat3)>>,
}

impl QuasiconvexSurrogate {
    pub fn new(base: &BaseEnergy, inner: &InnerSolverConfig) -> Result<Self, CellError> {
        Self::with_cells(base, inner, 4)
    }

    pub fn with_cells(base: &BaseEnergy, inner: &InnerSolverConfig, cells: usize) -> Result<Self, CellError> {
        let mesh = CellMesh::new([cells; 3], Domain::UnitCube, BoundaryMode::Periodic)?;
        Ok(Self {
            base: base.clone(),
            density: StoredEnergyDensity::new(base.clone())?,
            mesh,
            inner: InnerSolverConfig {
                multistart: 1,
                ..*inner
            },
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn base(&self) -> &BaseEnergy {
        &self.base
    }

    pub fn cached(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    fn compute(&self, f: &Mat3) -> Result<(f64, Mat3), CellError> {
        let (w0, s0) = self.base.energy_stress(f);
        let lam = lamination_base(&self.base, f, None);
        let mut best = (w0, s0);
        if lam.value < best.0 {
            best = (lam.value, lam.stress);
        }
        let mut laminates = vec![lam];
        for n in unit_axes() {
            laminates.push(lamination_base(&self.base, f, Some(n)));
        }
        let cube = cube_minimize(&self.density, &self.base, f, &self.mesh, &self.inner, &laminates)?;
        if cube.value < best.0 {
            best = (cube.value, cube.stress);
        }
        Ok(best)
    }

    pub fn evaluate(&self, f: &Mat3) -> Result<(f64, Mat3), CellError> {
        if self.base.is_convex() {
            return Ok(self.base.energy_stress(f));
        }
        let (key, q) = quantize(f);
        if let Some(v) = self.cache.read().ok().and_then(|c| c.get(&key).copied()) {
            return Ok(v);
        }
        let v = self.compute(&q)?;
        if let Ok(mut c) = self.cache.write() {
            c.insert(key, v);
        }
        Ok(v)
    }
}

impl PointEnergy for QuasiconvexSurrogate {
    fn energy(&self, f: &Mat3) -> Result<f64, IntegrandError> {
        Ok(self.energy_stress(f)?.0)
    }

    fn energy_stress(&self, f: &Mat3) -> Result<(f64, Mat3), IntegrandError> {
        self.evaluate(f)
            .map_err(|e| IntegrandError::InvalidParameter(format!("surrogate evaluation failed: {e}")))
    }
}

/// Two wells `±A` given by rows.
pub fn symmetric_wells(a: &Mat3) -> [Mat3; 2] {
    [*a, -a]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_well() -> (StoredEnergyDensity, Mat3) {
        let a = Vec3::new(0.4, -0.2, 0.3) * Vec3::x().transpose();
        (StoredEnergyDensity::two_well(&symmetric_wells(&a), 1.0).unwrap(), a)
    }

    #[test]
    fn convex_bound_is_unrelaxed() {
        let w = StoredEnergyDensity::squared_norm();
        let f = Mat3::from_fn(|i, j| (i as f64) - (j as f64) * 0.5);
        let x = MaterialPoint::new([0.5, 0.5], 0.0);
        let b = lamination_upper_bound(&w, &x, &f, None).unwrap();
        assert_eq!(b.value, w.evaluate(&x, &f).unwrap());
        assert!(!b.improved);
    }

    #[test]
    fn midpoint_of_compatible_wells_is_zero() {
        let (w, a) = two_well();
        let x = MaterialPoint::new([0.5, 0.5], 0.0);
        let b = lamination_upper_bound(&w, &x, &Mat3::zeros(), None).unwrap();
        assert!(b.value < 1e-12, "{}", b.value);
        assert!((b.lambda - 0.5).abs() < 1e-6);
        assert!(lamination_upper_bound(&w, &x, &a, None).unwrap().value < 1e-14);
    }

    #[test]
    fn surrogate_matches_distance_to_segment() {
        let (w, a) = two_well();
        let s = QuasiconvexSurrogate::new(w.base(), &InnerSolverConfig::default()).unwrap();
        // F = t A + B with B orthogonal to A: envelope is |B|²
        let b = Mat3::from_fn(|i, j| if j == 1 { 0.1 * (i as f64 + 1.0) } else { 0.0 });
        let (v, _) = s.evaluate(&(a * 0.3 + b)).unwrap();
        assert!((v - b.norm_squared()).abs() < 1e-8, "{v}");
        assert_eq!(s.cached(), 1);
        s.evaluate(&(a * 0.3 + b)).unwrap();
        assert_eq!(s.cached(), 1);
    }
}
