//! The invariant suite behind `filmrelax check`.
//!
//! Every check draws from its own generator seeded by the run seed and the
//! check's position in [`CheckName::ALL`], so results do not depend on which
//! other checks run or in what order.

use filmrelax::cell::{
    cosserat_density, lamination_upper_bound, membrane_density, membrane_density_periodic, minimize_over_z,
    quasiconvexify, refinement_sequence, CellOp,
};
use filmrelax::field::{energy_gradient, energy_integral, BoundaryMode, CellMesh, Domain, QuadratureRule, XMode};
use filmrelax::gamma::{cell_energy, scaled_energy, tile_cell_field};
use filmrelax::{
    join, BaseEnergy, CellProblemSpec, DiscreteField, LoadSystem, MaterialPoint, Mat3, Mat3x2, Modulation, Rect,
    StoredEnergyDensity, ThinFilmProblem, Vec3,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{rows2, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    /// Sampled growth sandwich of `W`.
    Growth,
    /// `∂W/∂F` against central differences.
    StressFd,
    /// Assembled gradient against directional central differences.
    EnergyGradientFd,
    QuadratureWeights,
    /// Transverse average of `x₃ z` plus an `x₃`-independent part.
    TransverseAverage,
    /// Injection into a refined mesh keeps the field and its energy.
    InjectionInvariance,
    /// The fiber infimum is below `W(F̄ | z)` for sampled `z`.
    FiberInfimum,
    /// Membrane and Cosserat values inside their growth bounds.
    DensityBounds,
    /// Clamped and periodic membrane forms agree (convex integrands).
    FormEquivalence,
    /// `min_z Q*W(F̄ | z)` equals the membrane density.
    ZElimination,
    /// Midpoint convexity of the Cosserat density in `z`.
    ConvexityZ,
    /// Midpoint convexity of the membrane density along rank-one segments.
    RankOne,
    /// Non-increasing values over 2³, 4³, 8³ nested meshes.
    MeshMonotonicity,
    /// The discrete quasiconvexification never exceeds `W`, and reaches
    /// the laminate bound between rank-one connected wells.
    Relaxation,
    /// Configured loads pass the moment compatibility test and a violating
    /// system is rejected.
    LoadCompatibility,
    /// A tiled cell field has the cell energy per tile.
    TiledCell,
}

impl CheckName {
    pub const ALL: [CheckName; 16] = [
        CheckName::Growth,
        CheckName::StressFd,
        CheckName::EnergyGradientFd,
        CheckName::QuadratureWeights,
        CheckName::TransverseAverage,
        CheckName::InjectionInvariance,
        CheckName::FiberInfimum,
        CheckName::DensityBounds,
        CheckName::FormEquivalence,
        CheckName::ZElimination,
        CheckName::ConvexityZ,
        CheckName::RankOne,
        CheckName::MeshMonotonicity,
        CheckName::Relaxation,
        CheckName::LoadCompatibility,
        CheckName::TiledCell,
    ];

    fn index(self) -> u64 {
        CheckName::ALL.iter().position(|c| *c == self).expect("listed") as u64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: CheckName,
    pub passed: bool,
    pub samples: usize,
    pub violations: usize,
    /// Largest observed error measure, in the check's own units.
    pub worst: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

struct Tally {
    samples: usize,
    violations: usize,
    worst: f64,
    note: Option<String>,
}

impl Tally {
    fn new() -> Self {
        Self {
            samples: 0,
            violations: 0,
            worst: 0.0,
            note: None,
        }
    }

    /// Records a sample whose error measure must not exceed `limit`.
    fn record(&mut self, err: f64, limit: f64, what: impl FnOnce() -> String) {
        self.samples += 1;
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !(err <= limit) {
            self.violations += 1;
            if self.note.is_none() {
                self.note = Some(what());
            }
        }
    }

    fn finish(self, name: CheckName) -> CheckOutcome {
        CheckOutcome {
            name,
            passed: self.violations == 0,
            samples: self.samples,
            violations: self.violations,
            worst: self.worst,
            note: self.note,
        }
    }
}

fn skipped(name: CheckName, why: &str) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: true,
        samples: 0,
        violations: 0,
        worst: 0.0,
        note: Some(format!("not applicable: {why}")),
    }
}

struct Ctx<'a> {
    w: &'a StoredEnergyDensity,
    cfg: &'a RunConfig,
}

impl Ctx<'_> {
    fn rng(&self, name: CheckName) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (name.index() + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn omega(&self) -> Rect {
        self.w.omega().copied().unwrap_or_else(Rect::unit)
    }

    fn point(&self, rng: &mut ChaCha8Rng) -> MaterialPoint {
        let o = self.omega();
        MaterialPoint::new(
            [rng.random_range(o.min[0]..o.max[0]), rng.random_range(o.min[1]..o.max[1])],
            rng.random_range(-1.0..1.0),
        )
    }

    fn spec(&self, x_alpha: [f64; 2], f_bar: Mat3x2, cells: usize) -> Result<CellProblemSpec, CliError> {
        let mut s = self.cfg.cell.spec(self.cfg.seed, cells)?;
        s.x0 = MaterialPoint::new(x_alpha, 0.0);
        s.f_bar = f_bar;
        Ok(s)
    }

    fn tol(&self) -> f64 {
        self.cfg.cell.tol
    }
}

pub fn random_mat3(rng: &mut ChaCha8Rng, amp: f64) -> Mat3 {
    Mat3::from_fn(|_, _| rng.random_range(-amp..amp))
}

pub fn random_vec3(rng: &mut ChaCha8Rng, amp: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-amp..amp))
}

/// A random `F̄` with entries in `(−amp, amp)`.
///
/// For a two-well energy with wells `±A` whose difference has no transverse
/// column, the component of `F̄` along `A` is pushed outside `(−|A|, |A|)`.
/// Inside that slab the relaxed density is attained only by fine in-plane
/// lamination, which the clamped cell form resolves at `O(h)` accuracy.
pub fn sample_f_bar(w: &StoredEnergyDensity, rng: &mut ChaCha8Rng, amp: f64) -> Mat3x2 {
    let mut f = Mat3x2::from_fn(|_, _| rng.random_range(-amp..amp));
    if let Some(dir) = in_plane_well_offset(w.base()) {
        let unit = dir / dir.norm();
        let t = f.dot(&unit);
        let target = dir.norm() * rng.random_range(1.1..1.6) * if t < 0.0 { -1.0 } else { 1.0 };
        f += unit * (target - t);
    }
    f
}

/// Half the difference of two symmetric wells, when it is purely in-plane.
fn in_plane_well_offset(base: &BaseEnergy) -> Option<Mat3x2> {
    let centers = base.well_centers();
    if !matches!(base, BaseEnergy::TwoWell { .. }) || centers.len() != 2 {
        return None;
    }
    let half = (centers[0] - centers[1]) * 0.5;
    let mid = (centers[0] + centers[1]) * 0.5;
    let transverse = half.column(2).norm();
    (mid.norm() < 1e-14 && transverse < 1e-14 && half.norm() > 0.0).then(|| half.fixed_columns::<2>(0).into_owned())
}

fn random_field(mesh: &CellMesh, rng: &mut ChaCha8Rng, amp: f64) -> DiscreteField {
    let vals = (0..mesh.node_count()).map(|_| random_vec3(rng, amp)).collect();
    let mut f = DiscreteField::from_values(mesh, vals).expect("sized to mesh");
    f.project_boundary();
    f
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn run_checks(cfg: &RunConfig, w: &StoredEnergyDensity) -> Result<Vec<CheckOutcome>, CliError> {
    let ctx = Ctx { w, cfg };
    cfg.check
        .checks
        .iter()
        .map(|&name| {
            log::info!("check {name:?}");
            run_one(&ctx, name)
        })
        .collect()
}

fn run_one(ctx: &Ctx, name: CheckName) -> Result<CheckOutcome, CliError> {
    let mut rng = ctx.rng(name);
    let n = ctx.cfg.check.samples;
    let m = ctx.cfg.check.cell_samples;
    let cells = ctx.cfg.check.cells;
    let w = ctx.w;
    let tol = ctx.tol();
    let mut t = Tally::new();
    match name {
        CheckName::Growth => {
            let r = w.verify_growth(n.max(1) * 10);
            t.samples = r.samples;
            t.violations = r.violation_count;
            t.note = r
                .violations
                .first()
                .map(|v| format!("W = {} violates the {:?} bound {}", v.value, v.side, v.bound));
        }
        CheckName::StressFd => {
            while t.samples < n {
                let x = ctx.point(&mut rng);
                let f = random_mat3(&mut rng, 2.0);
                if near_well_tie(w.base(), &f) {
                    continue;
                }
                let s = w.stress(&x, &f)?;
                let h = 1e-5 * f.norm().max(1.0);
                let mut fd = Mat3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        let mut e = Mat3::zeros();
                        e[(i, j)] = h;
                        fd[(i, j)] = (w.evaluate(&x, &(f + e))? - w.evaluate(&x, &(f - e))?) / (2.0 * h);
                    }
                }
                let err = (fd - s).norm() / s.norm().max(f64::MIN_POSITIVE);
                t.record(err, 1e-6, || format!("relative stress error {err:e} at F = {f:?}"));
            }
        }
        CheckName::EnergyGradientFd => {
            for k in 0..n {
                let boundary = if k % 2 == 0 { BoundaryMode::LateralZero } else { BoundaryMode::LateralPeriodic };
                let mesh = CellMesh::unit_cell(2, boundary)?;
                let u = random_field(&mesh, &mut rng, 0.3);
                let d = random_field(&mesh, &mut rng, 1.0);
                let offset = random_mat3(&mut rng, 1.0);
                let scale = rng.random_range(0.2..5.0);
                let xm = XMode::Frozen { x_alpha: ctx.point(&mut rng).x_alpha };
                let (_, g) = energy_gradient(w, &u, scale, 0.5, xm, offset)?;
                let exact: f64 = g.values().iter().zip(d.values()).map(|(a, b)| a.dot(b)).sum();
                let h = 1e-6;
                let shifted = |s: f64| -> Result<f64, CliError> {
                    let v = u.values().iter().zip(d.values()).map(|(a, b)| a + b * s).collect();
                    let f = DiscreteField::from_values(&mesh, v)?;
                    Ok(energy_integral(w, &f, scale, 0.5, xm, offset)?)
                };
                let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
                let err = (fd - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
                t.record(err, 1e-6, || format!("directional derivative {exact} vs difference quotient {fd}"));
            }
        }
        CheckName::QuadratureWeights => {
            let meshes = [
                CellMesh::unit_cell(cells, BoundaryMode::LateralZero)?,
                CellMesh::new([cells; 3], Domain::UnitCube, BoundaryMode::Periodic)?,
                CellMesh::new([cells + 1, cells, 2], Domain::Cylinder { omega: ctx.omega() }, BoundaryMode::LateralZero)?,
            ];
            for mesh in &meshes {
                for rule in [QuadratureRule::midpoint(), QuadratureRule::gauss2()] {
                    let vol = mesh.domain().measure();
                    let err = (rule.total_weight(mesh) - vol).abs() / vol;
                    t.record(err, 1e-13, || format!("weights sum to {} on a domain of measure {vol}", rule.total_weight(mesh)));
                }
            }
        }
        CheckName::TransverseAverage => {
            for _ in 0..n.div_ceil(10) {
                let z = random_vec3(&mut rng, 2.0);
                let c = random_mat3(&mut rng, 1.0);
                let mesh = CellMesh::unit_cell(cells, BoundaryMode::LateralPeriodic)?;
                // the lateral part is periodic on the unit cell and independent of x₃
                let tau = std::f64::consts::TAU;
                let u = DiscreteField::from_fn(&mesh, |x| {
                    z * x[2] + c * Vec3::new((tau * x[0]).sin(), (tau * x[1]).cos(), 1.0)
                });
                let scale = rng.random_range(0.1..4.0);
                for v in u.transverse_average(scale) {
                    let err = (v - z * (2.0 * scale)).norm() / (z.norm() * scale).max(1.0);
                    t.record(err, 1e-12, || format!("transverse average {v:?} for z = {z:?}"));
                }
            }
        }
        CheckName::InjectionInvariance => {
            let quad = StoredEnergyDensity::squared_norm().with_modulation(Modulation::two_layer(1.0, 3.0))?;
            for _ in 0..n.div_ceil(10) {
                let coarse = CellMesh::unit_cell(2, BoundaryMode::LateralZero)?;
                let u = random_field(&coarse, &mut rng, 0.3);
                let fine = u.inject(&coarse.refine())?;
                for _ in 0..8 {
                    let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0)];
                    let err = (u.interpolate(x) - fine.interpolate(x)).norm();
                    t.record(err, 1e-13, || format!("injected field differs by {err:e} at {x:?}"));
                }
                let xm = XMode::Frozen { x_alpha: [0.5, 0.5] };
                let f = random_mat3(&mut rng, 1.0);
                let scale = rng.random_range(0.2..5.0);
                let ec = energy_integral(&quad, &u, scale, 0.5, xm, f)?;
                let ef = energy_integral(&quad, &fine, scale, 0.5, xm, f)?;
                let err = rel(ec, ef);
                t.record(err, 1e-12, || format!("quadratic energy {ec} on the coarse mesh, {ef} on the fine one"));
            }
        }
        CheckName::FiberInfimum => {
            for _ in 0..n.div_ceil(5) {
                let x = ctx.point(&mut rng);
                let f = Mat3x2::from_fn(|_, _| rng.random_range(-2.0..2.0));
                let fi = w.fiber_infimum(&x, &f)?;
                for _ in 0..5 {
                    let z = random_vec3(&mut rng, 3.0);
                    let v = w.evaluate(&x, &join(&f, &z))?;
                    let err = (fi.value - v) / v.abs().max(1.0);
                    t.record(err, 1e-10, || format!("fiber infimum {} above W(F̄ | z) = {v}", fi.value));
                }
            }
        }
        CheckName::DensityBounds => {
            for _ in 0..m {
                let x = ctx.point(&mut rng).x_alpha;
                let f = sample_f_bar(w, &mut rng, 1.5);
                let z = random_vec3(&mut rng, 1.5);
                let spec = ctx.spec(x, f, cells)?;
                for (sol, zn) in [
                    (membrane_density(w, &spec)?, 0.0),
                    (cosserat_density(w, &spec.clone().with_z(z))?, z.norm()),
                ] {
                    let (lo, hi) = w.growth().effective_bounds(f.norm(), zn);
                    // relative rounding slack, as in the pointwise growth check
                    let excess = (lo - sol.value).max(sol.value - hi).max(0.0) / hi.max(1.0);
                    t.record(excess, 1e-12, || format!("value {} outside [{lo}, {hi}]", sol.value));
                    let over = (sol.value - sol.diagnostics.upper_bound).max(0.0) / sol.value.abs().max(1.0);
                    t.record(over, tol, || format!("value {} above the affine lift {}", sol.value, sol.diagnostics.upper_bound));
                }
            }
        }
        CheckName::FormEquivalence => {
            if !w.is_convex() {
                return Ok(skipped(name, "the periodic form of a nonconvex energy goes through the relaxation surrogate"));
            }
            for _ in 0..m {
                let x = ctx.point(&mut rng).x_alpha;
                let spec = ctx.spec(x, sample_f_bar(w, &mut rng, 1.5), cells)?;
                let a = membrane_density(w, &spec)?.value;
                let b = membrane_density_periodic(w, &spec)?.value;
                t.record(rel(a, b), 2.0 * tol, || format!("clamped {a} vs periodic {b}"));
            }
        }
        CheckName::ZElimination => {
            for _ in 0..m {
                let x = ctx.point(&mut rng).x_alpha;
                let spec = ctx.spec(x, sample_f_bar(w, &mut rng, 1.5), cells)?;
                let a = membrane_density(w, &spec)?.value;
                let (b, _) = minimize_over_z(w, &spec)?;
                t.record(rel(a, b.value), 2.0 * tol, || format!("membrane {a} vs min over z {}", b.value));
            }
        }
        CheckName::ConvexityZ => {
            for _ in 0..m {
                let x = ctx.point(&mut rng).x_alpha;
                let spec = ctx.spec(x, sample_f_bar(w, &mut rng, 1.5), cells)?;
                let (z1, z2) = (random_vec3(&mut rng, 1.5), random_vec3(&mut rng, 1.5));
                let v = |z: Vec3| cosserat_density(w, &spec.clone().with_z(z)).map(|s| s.value);
                let (a, b, mid) = (v(z1)?, v(z2)?, v((z1 + z2) * 0.5)?);
                let defect = (mid - 0.5 * (a + b)).max(0.0) / mid.abs().max(1.0);
                t.record(defect, 2.0 * tol, || format!("midpoint {mid} above the chord {}", 0.5 * (a + b)));
            }
        }
        CheckName::RankOne => {
            for _ in 0..m {
                let x = ctx.point(&mut rng).x_alpha;
                let f = sample_f_bar(w, &mut rng, 1.5);
                let a = random_vec3(&mut rng, 1.0);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let n = [theta.cos(), theta.sin()];
                let d = Mat3x2::from_fn(|i, j| a[i] * n[j]);
                let v = |g: Mat3x2| -> Result<f64, CliError> { Ok(membrane_density(w, &ctx.spec(x, g, cells)?)?.value) };
                let (lo, hi, mid) = (v(f - d)?, v(f + d)?, v(f)?);
                let defect = (mid - 0.5 * (lo + hi)).max(0.0) / mid.abs().max(1.0);
                t.record(defect, 2.0 * tol, || format!("midpoint {mid} above the chord {}", 0.5 * (lo + hi)));
            }
        }
        CheckName::MeshMonotonicity => {
            let spec = ctx.spec(ctx.cfg.cell.x_alpha, rows2(&ctx.cfg.cell.f_bar), 2)?;
            let seq = refinement_sequence(CellOp::Membrane, w, &spec, 3)?;
            for pair in seq.windows(2) {
                let (c, f) = (pair[0].value, pair[1].value);
                let rise = (f - c).max(0.0) / c.abs().max(1.0);
                t.record(rise, 1e-8, || format!("value rose from {c} to {f} under refinement"));
            }
        }
        CheckName::Relaxation => {
            let mesh = CellMesh::new([cells; 3], Domain::UnitCube, BoundaryMode::Periodic)?;
            let inner = filmrelax::InnerSolverConfig { seed: ctx.cfg.seed, ..ctx.cfg.cell.inner };
            let mut cases: Vec<Mat3> = w.base().well_centers().windows(2).map(|p| (p[0] + p[1]) * 0.5).collect();
            let rank_one_mids = cases.len();
            cases.extend((0..m).map(|_| random_mat3(&mut rng, 1.0)));
            for (k, f) in cases.iter().enumerate() {
                let x = ctx.point(&mut rng);
                let q = quasiconvexify(w, &x, f, &mesh, &inner)?.value;
                let wf = w.evaluate(&x, f)?;
                let over = (q - wf).max(0.0) / wf.abs().max(1.0);
                if w.is_convex() {
                    t.record(rel(q, wf), 2.0 * tol, || format!("relaxation {q} differs from the convex W = {wf}"));
                } else {
                    t.record(over, tol, || format!("relaxation {q} above W = {wf}"));
                }
                if k < rank_one_mids && w.base().rank_one_connections().len() > k {
                    let lam = lamination_upper_bound(w, &x, f, None)?.value;
                    let gap = (q - lam).max(0.0);
                    t.record(gap, 1e-3, || format!("relaxation {q} above the laminate value {lam} between wells"));
                }
            }
        }
        CheckName::LoadCompatibility => {
            let points = ctx.cfg.gamma.problem(w, ctx.cfg.cell.inner).plate().sample_points();
            let ok = ctx.cfg.gamma.loads.check_compatibility(&points).is_ok();
            t.record(if ok { 0.0 } else { 1.0 }, 0.0, || "configured loads violate g0(x, 1) + g0(x, -1) = 0".into());
            let mut bad = LoadSystem::zero();
            bad.g0[0] = filmrelax::expr::Expr::constant(1.0);
            let rejected = bad.check_compatibility(&points).is_err();
            t.record(if rejected { 0.0 } else { 1.0 }, 0.0, || "a constant moment load was accepted".into());
        }
        CheckName::TiledCell => {
            if w.modulation().depends_on_x_alpha() {
                return Ok(skipped(name, "the modulation varies in-plane, so tiles differ"));
            }
            let f = rows2(&ctx.cfg.cell.f_bar);
            let sol = membrane_density(w, &ctx.spec([0.5, 0.5], f, cells)?)?;
            let p = ThinFilmProblem::new(w.clone(), Rect::new([0.0, 0.0], [2.0, 1.0]), f, vec![0.25])
                .with_cells([2 * cells, cells], cells);
            for eps in [1.0, 0.25] {
                let u = tile_cell_field(&p, &sol.field)?;
                let e = scaled_energy(&p, eps, &u)?;
                let c = cell_energy(w, [0.5, 0.5], &f, &sol.field, 1.0 / eps)?;
                t.record(rel(e, 2.0 * c), 1e-10, || format!("tiled energy {e} vs twice the cell energy {c}"));
            }
        }
    }
    Ok(t.finish(name))
}

/// Points where a multi-well energy switches wells are kinks; finite
/// differences across them say nothing about the stress.
fn near_well_tie(base: &BaseEnergy, f: &Mat3) -> bool {
    let mut d: Vec<f64> = base.well_centers().iter().map(|a| (f - a).norm()).collect();
    if d.len() < 2 {
        return false;
    }
    d.sort_by(f64::total_cmp);
    d[1] - d[0] < 1e-3
}
