//! Trilinear fields on structured hexahedral meshes of the unit cell, the
//! unit cube and rescaled cylinders, with scaled gradients and energy assembly.
//!
//! Nodes are numbered `i + (n1+1)(j + (n2+1)k)`; the eight nodes of an element
//! are ordered `a + 2b + 4c` for offsets `(a, b, c) ∈ {0,1}³`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrand::{IntegrandError, Mat3, Mat3x2, MaterialPoint, PointEnergy, StoredEnergyDensity, Vec3};

pub use crate::integrand::Rect;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("target mesh is not a dyadic refinement of the source mesh")]
    NotNested,
    #[error("field does not match mesh: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Integrand(#[from] IntegrandError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Domain {
    /// `(0,1)² × (−1,1)`.
    UnitCell,
    /// `(0,1)³`.
    UnitCube,
    /// `ω × (−1,1)`.
    Cylinder { omega: Rect },
}

impl Domain {
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Domain::UnitCell => ([0.0, 0.0, -1.0], [1.0, 1.0, 1.0]),
            Domain::UnitCube => ([0.0; 3], [1.0; 3]),
            Domain::Cylinder { omega } => (
                [omega.min[0], omega.min[1], -1.0],
                [omega.max[0], omega.max[1], 1.0],
            ),
        }
    }

    pub fn measure(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (0..3).map(|i| hi[i] - lo[i]).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Values vanish on the lateral faces; top and bottom are free.
    LateralZero,
    /// Opposite lateral faces are identified; top and bottom are free.
    LateralPeriodic,
    /// Lateral faces carry `F̄ x_α`; top and bottom are free.
    LateralAffine { f_bar: Mat3x2 },
    /// Values vanish on every face.
    AllZero,
    /// Opposite faces are identified in all three directions.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMesh {
    n: [usize; 3],
    domain: Domain,
    boundary: BoundaryMode,
}

impl CellMesh {
    pub fn new(n: [usize; 3], domain: Domain, boundary: BoundaryMode) -> Result<Self, FieldError> {
        if n.iter().any(|&k| k < 2) {
            return Err(FieldError::InvalidMesh(format!("cell counts must be >= 2, got {n:?}")));
        }
        if let Domain::Cylinder { omega } = &domain {
            if !omega.is_valid() {
                return Err(FieldError::InvalidMesh("degenerate rectangle".into()));
            }
        }
        Ok(Self { n, domain, boundary })
    }

    pub fn unit_cell(n: usize, boundary: BoundaryMode) -> Result<Self, FieldError> {
        Self::new([n; 3], Domain::UnitCell, boundary)
    }

    pub fn n(&self) -> [usize; 3] {
        self.n
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn boundary(&self) -> &BoundaryMode {
        &self.boundary
    }

    pub fn with_boundary(&self, boundary: BoundaryMode) -> Self {
        Self {
            boundary,
            ..self.clone()
        }
    }

    pub fn spacing(&self) -> [f64; 3] {
        let (lo, hi) = self.domain.bounds();
        [0, 1, 2].map(|i| (hi[i] - lo[i]) / self.n[i] as f64)
    }

    pub fn node_dims(&self) -> [usize; 3] {
        self.n.map(|k| k + 1)
    }

    pub fn node_count(&self) -> usize {
        self.node_dims().iter().product()
    }

    pub fn element_count(&self) -> usize {
        self.n.iter().product()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        let d = self.node_dims();
        i + d[0] * (j + d[1] * k)
    }

    pub fn node_ijk(&self, idx: usize) -> [usize; 3] {
        let d = self.node_dims();
        [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])]
    }

    pub fn node_coords(&self, idx: usize) -> [f64; 3] {
        let (lo, _) = self.domain.bounds();
        let h = self.spacing();
        let ijk = self.node_ijk(idx);
        [0, 1, 2].map(|a| lo[a] + h[a] * ijk[a] as f64)
    }

    pub fn element_nodes(&self, e: usize) -> [usize; 8] {
        let [n1, n2, _] = self.n;
        let (i, j, k) = (e % n1, (e / n1) % n2, e / (n1 * n2));
        let mut out = [0; 8];
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.node_index(i + (a & 1), j + ((a >> 1) & 1), k + ((a >> 2) & 1));
        }
        out
    }

    /// Lower corner of element `e`.
    pub fn element_origin(&self, e: usize) -> [f64; 3] {
        self.node_coords(self.element_nodes(e)[0])
    }

    pub fn element_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    /// Doubles every cell count.
    pub fn refine(&self) -> Self {
        Self {
            n: self.n.map(|k| 2 * k),
            ..self.clone()
        }
    }

    /// Per-axis refinement factors when `fine` is a dyadic refinement of `self`.
    pub fn refinement_ratio(&self, fine: &CellMesh) -> Result<[usize; 3], FieldError> {
        if fine.domain != self.domain {
            return Err(FieldError::NotNested);
        }
        let mut r = [1; 3];
        for a in 0..3 {
            if fine.n[a] % self.n[a] != 0 || !(fine.n[a] / self.n[a]).is_power_of_two() {
                return Err(FieldError::NotNested);
            }
            r[a] = fine.n[a] / self.n[a];
        }
        Ok(r)
    }

    fn is_lateral(&self, ijk: [usize; 3]) -> bool {
        ijk[0] == 0 || ijk[0] == self.n[0] || ijk[1] == 0 || ijk[1] == self.n[1]
    }

    fn is_boundary(&self, ijk: [usize; 3]) -> bool {
        self.is_lateral(ijk) || ijk[2] == 0 || ijk[2] == self.n[2]
    }

    /// The representative of a node under periodic identification.
    pub fn canonical_node(&self, idx: usize) -> usize {
        let [mut i, mut j, mut k] = self.node_ijk(idx);
        match self.boundary {
            BoundaryMode::LateralPeriodic => {
                i %= self.n[0];
                j %= self.n[1];
            }
            BoundaryMode::Periodic => {
                i %= self.n[0];
                j %= self.n[1];
                k %= self.n[2];
            }
            _ => {}
        }
        self.node_index(i, j, k)
    }

    /// The prescribed value at a node, or `None` if the node is free.
    pub fn pinned_value(&self, idx: usize) -> Option<Vec3> {
        let ijk = self.node_ijk(idx);
        match &self.boundary {
            BoundaryMode::LateralZero if self.is_lateral(ijk) => Some(Vec3::zeros()),
            BoundaryMode::AllZero if self.is_boundary(ijk) => Some(Vec3::zeros()),
            BoundaryMode::LateralAffine { f_bar } if self.is_lateral(ijk) => {
                let x = self.node_coords(idx);
                Some(f_bar * nalgebra::Vector2::new(x[0], x[1]))
            }
            _ => None,
        }
    }
}

/// Reference-cell quadrature on `[0,1]³`; weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn midpoint() -> Self {
        Self {
            points: vec![[0.5; 3]],
            weights: vec![1.0],
        }
    }

    pub fn gauss2() -> Self {
        let g = 0.5 / 3f64.sqrt();
        let x = [0.5 - g, 0.5 + g];
        let mut points = Vec::with_capacity(8);
        for c in 0..2 {
            for b in 0..2 {
                for a in 0..2 {
                    points.push([x[a], x[b], x[c]]);
                }
            }
        }
        Self {
            points,
            weights: vec![0.125; 8],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of all physical weights over `mesh`, i.e. the domain measure.
    pub fn total_weight(&self, mesh: &CellMesh) -> f64 {
        let per: f64 = self.weights.iter().sum();
        per * mesh.element_volume() * mesh.element_count() as f64
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::gauss2()
    }
}

/// Shape values and physical derivatives at the quadrature points of one
/// element; identical for every element of a uniform mesh.
#[derive(Debug, Clone)]
struct ShapeTable {
    values: Vec<[f64; 8]>,
    grads: Vec<[[f64; 3]; 8]>,
    weights: Vec<f64>,
}

impl ShapeTable {
    fn new(mesh: &CellMesh, rule: &QuadratureRule) -> Self {
        let h = mesh.spacing();
        let vol = mesh.element_volume();
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for p in &rule.points {
            let mut v = [0.0; 8];
            let mut g = [[0.0; 3]; 8];
            for a in 0..8 {
                let o = [a & 1, (a >> 1) & 1, (a >> 2) & 1];
                let f: [f64; 3] = [0, 1, 2].map(|d| if o[d] == 1 { p[d] } else { 1.0 - p[d] });
                let df: [f64; 3] = [0, 1, 2].map(|d| if o[d] == 1 { 1.0 } else { -1.0 } / h[d]);
                v[a] = f[0] * f[1] * f[2];
                g[a] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
            }
            values.push(v);
            grads.push(g);
        }
        Self {
            values,
            grads,
            weights: rule.weights.iter().map(|w| w * vol).collect(),
        }
    }
}

/// A vector field given by its values at every mesh node.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    mesh: CellMesh,
    values: Vec<Vec3>,
    /// Prescribed mean transverse average, when the field carries one.
    target: Option<Vec3>,
}

impl DiscreteField {
    pub fn zeros(mesh: &CellMesh) -> Self {
        let mut f = Self {
            mesh: mesh.clone(),
            values: vec![Vec3::zeros(); mesh.node_count()],
            target: None,
        };
        f.project_boundary();
        f
    }

    /// Samples `f` at the nodes, then enforces the boundary mode.
    pub fn from_fn(mesh: &CellMesh, f: impl Fn([f64; 3]) -> Vec3) -> Self {
        let values = (0..mesh.node_count()).map(|i| f(mesh.node_coords(i))).collect();
        let mut out = Self {
            mesh: mesh.clone(),
            values,
            target: None,
        };
        out.project_boundary();
        out
    }

    pub fn from_values(mesh: &CellMesh, values: Vec<Vec3>) -> Result<Self, FieldError> {
        if values.len() != mesh.node_count() {
            return Err(FieldError::Mismatch(format!(
                "{} values for {} nodes",
                values.len(),
                mesh.node_count()
            )));
        }
        Ok(Self {
            mesh: mesh.clone(),
            values,
            target: None,
        })
    }

    pub fn with_target(mut self, target: Vec3) -> Self {
        self.target = Some(target);
        self
    }

    pub fn mesh(&self) -> &CellMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[Vec3] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec3] {
        &mut self.values
    }

    pub fn target(&self) -> Option<Vec3> {
        self.target
    }

    /// Pins constrained nodes and copies representatives onto identified nodes.
    pub fn project_boundary(&mut self) {
        for idx in 0..self.values.len() {
            if let Some(v) = self.mesh.pinned_value(idx) {
                self.values[idx] = v;
            } else {
                let c = self.mesh.canonical_node(idx);
                if c != idx {
                    self.values[idx] = self.values[c];
                }
            }
        }
    }

    /// Largest deviation from the boundary mode.
    pub fn boundary_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for idx in 0..self.values.len() {
            let d = match self.mesh.pinned_value(idx) {
                Some(v) => (self.values[idx] - v).amax(),
                None => (self.values[idx] - self.values[self.mesh.canonical_node(idx)]).amax(),
            };
            worst = worst.max(d);
        }
        worst
    }

    /// Trilinear interpolation at a point of the domain.
    pub fn interpolate(&self, x: [f64; 3]) -> Vec3 {
        let (lo, _) = self.mesh.domain.bounds();
        let h = self.mesh.spacing();
        let n = self.mesh.n;
        let mut cell = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let s = (x[a] - lo[a]) / h[a];
            let c = (s.floor().max(0.0) as usize).min(n[a] - 1);
            cell[a] = c;
            t[a] = s - c as f64;
        }
        let mut out = Vec3::zeros();
        for a in 0..8 {
            let o = [a & 1, (a >> 1) & 1, (a >> 2) & 1];
            let w: f64 = (0..3)
                .map(|d| if o[d] == 1 { t[d] } else { 1.0 - t[d] })
                .product();
            if w != 0.0 {
                let idx = self.mesh.node_index(cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]);
                out += self.values[idx] * w;
            }
        }
        out
    }

    /// The same piecewise-trilinear function on a dyadically refined mesh.
    pub fn inject(&self, fine: &CellMesh) -> Result<DiscreteField, FieldError> {
        let r = self.mesh.refinement_ratio(fine)?;
        let values = (0..fine.node_count())
            .map(|idx| {
                let ijk = fine.node_ijk(idx);
                if (0..3).all(|a| ijk[a] % r[a] == 0) {
                    self.values[self.mesh.node_index(ijk[0] / r[0], ijk[1] / r[1], ijk[2] / r[2])]
                } else {
                    self.interpolate(fine.node_coords(idx))
                }
            })
            .collect();
        Ok(DiscreteField {
            mesh: fine.clone(),
            values,
            target: self.target,
        })
    }

    /// `join(D_α u, scale · D₃ u)` at every quadrature point, element-major.
    pub fn scaled_gradient(&self, scale: f64, rule: &QuadratureRule) -> Vec<Mat3> {
        let table = ShapeTable::new(&self.mesh, rule);
        let mut out = Vec::with_capacity(self.mesh.element_count() * rule.len());
        for e in 0..self.mesh.element_count() {
            let nodes = self.mesh.element_nodes(e);
            for g in &table.grads {
                out.push(gradient_at(&self.values, &nodes, g, scale));
            }
        }
        out
    }

    /// `scale · ∫₋₁¹ D₃u dx₃` at each lateral node position, indexed `i + (n1+1) j`.
    pub fn transverse_average(&self, scale: f64) -> Vec<Vec3> {
        let d = self.mesh.node_dims();
        let mut out = Vec::with_capacity(d[0] * d[1]);
        for j in 0..d[1] {
            for i in 0..d[0] {
                let mut s = Vec3::zeros();
                for k in 0..self.mesh.n[2] {
                    s += self.values[self.mesh.node_index(i, j, k + 1)]
                        - self.values[self.mesh.node_index(i, j, k)];
                }
                out.push(s * scale);
            }
        }
        out
    }

    /// Area mean of [`Self::transverse_average`] over the lateral plane.
    pub fn mean_transverse_average(&self, scale: f64) -> Vec3 {
        let avg = self.transverse_average(scale);
        let d = self.mesh.node_dims();
        let mut s = Vec3::zeros();
        let mut wsum = 0.0;
        for j in 0..d[1] {
            for i in 0..d[0] {
                let w = trapezoid_weight(i, self.mesh.n[0]) * trapezoid_weight(j, self.mesh.n[1]);
                s += avg[i + d[0] * j] * w;
                wsum += w;
            }
        }
        s / wsum
    }

    /// Writes one node per line: `i j k u1 u2 u3`.
    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        let n = self.mesh.n;
        writeln!(w, "# nodes {} {} {}", n[0] + 1, n[1] + 1, n[2] + 1)?;
        for (idx, v) in self.values.iter().enumerate() {
            let [i, j, k] = self.mesh.node_ijk(idx);
            writeln!(w, "{i} {j} {k} {:e} {:e} {:e}", v[0], v[1], v[2])?;
        }
        Ok(())
    }
}

fn trapezoid_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        0.5
    } else {
        1.0
    }
}

fn gradient_at(values: &[Vec3], nodes: &[usize; 8], g: &[[f64; 3]; 8], scale: f64) -> Mat3 {
    let mut m = Mat3::zeros();
    for a in 0..8 {
        let u = values[nodes[a]];
        let d = [g[a][0], g[a][1], scale * g[a][2]];
        for r in 0..3 {
            for c in 0..3 {
                m[(r, c)] += u[r] * d[c];
            }
        }
    }
    m
}

/// Free degrees of freedom of a mesh: pinned nodes are dropped and identified
/// nodes share one representative. Optionally the mean top-minus-bottom jump
/// is projected out, which makes `(L/2)∫D₃φ` vanish for every free vector.
#[derive(Debug, Clone)]
pub struct DofMap {
    mesh: CellMesh,
    node_dof: Vec<Option<usize>>,
    pinned: Vec<Vec3>,
    free_nodes: usize,
    jump: Option<JumpProjection>,
}

#[derive(Debug, Clone)]
struct JumpProjection {
    top: Vec<usize>,
    bottom: Vec<usize>,
    /// `(x₃ − x₃_min)/(x₃_max − x₃_min)` per node.
    ramp: Vec<f64>,
}

impl DofMap {
    pub fn new(mesh: &CellMesh) -> Self {
        let n = mesh.node_count();
        let mut node_dof = vec![None; n];
        let mut pinned = vec![Vec3::zeros(); n];
        let mut free_nodes = 0;
        for idx in 0..n {
            if let Some(v) = mesh.pinned_value(idx) {
                pinned[idx] = v;
            } else if mesh.canonical_node(idx) == idx {
                node_dof[idx] = Some(free_nodes);
                free_nodes += 1;
            }
        }
        for idx in 0..n {
            if node_dof[idx].is_none() && mesh.pinned_value(idx).is_none() {
                node_dof[idx] = node_dof[mesh.canonical_node(idx)];
            }
        }
        Self {
            mesh: mesh.clone(),
            node_dof,
            pinned,
            free_nodes,
            jump: None,
        }
    }

    /// Adds the zero-mean-jump projection; needs a laterally periodic mesh.
    pub fn with_zero_mean_jump(mut self) -> Result<Self, FieldError> {
        if self.mesh.boundary != BoundaryMode::LateralPeriodic {
            return Err(FieldError::InvalidMesh(
                "transverse-average constraint requires a laterally periodic mesh".into(),
            ));
        }
        let [n1, n2, n3] = self.mesh.n;
        let mut top = Vec::new();
        let mut bottom = Vec::new();
        for j in 0..n2 {
            for i in 0..n1 {
                top.push(self.node_dof[self.mesh.node_index(i, j, n3)].expect("free"));
                bottom.push(self.node_dof[self.mesh.node_index(i, j, 0)].expect("free"));
            }
        }
        let ramp = (0..self.mesh.node_count())
            .map(|idx| self.mesh.node_ijk(idx)[2] as f64 / n3 as f64)
            .collect();
        self.jump = Some(JumpProjection { top, bottom, ramp });
        Ok(self)
    }

    pub fn mesh(&self) -> &CellMesh {
        &self.mesh
    }

    /// Number of scalar unknowns.
    pub fn len(&self) -> usize {
        3 * self.free_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.free_nodes == 0
    }

    fn mean_jump(&self, x: &[f64]) -> Vec3 {
        let p = self.jump.as_ref().expect("projection");
        let mut c = Vec3::zeros();
        for (t, b) in p.top.iter().zip(&p.bottom) {
            for r in 0..3 {
                c[r] += x[3 * t + r] - x[3 * b + r];
            }
        }
        c / p.top.len() as f64
    }

    /// Nodal values from free unknowns.
    pub fn expand(&self, x: &[f64], out: &mut [Vec3]) {
        for (idx, o) in out.iter_mut().enumerate() {
            *o = match self.node_dof[idx] {
                Some(d) => Vec3::new(x[3 * d], x[3 * d + 1], x[3 * d + 2]),
                None => self.pinned[idx],
            };
        }
        if let Some(p) = &self.jump {
            let c = self.mean_jump(x);
            for (o, w) in out.iter_mut().zip(&p.ramp) {
                *o -= c * *w;
            }
        }
    }

    /// Gradient with respect to the free unknowns from a nodal gradient.
    pub fn pull_back(&self, g: &[Vec3], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (idx, gi) in g.iter().enumerate() {
            if let Some(d) = self.node_dof[idx] {
                for r in 0..3 {
                    out[3 * d + r] += gi[r];
                }
            }
        }
        if let Some(p) = &self.jump {
            let mut s = Vec3::zeros();
            for (gi, w) in g.iter().zip(&p.ramp) {
                s += gi * *w;
            }
            let s = s / p.top.len() as f64;
            for (t, b) in p.top.iter().zip(&p.bottom) {
                for r in 0..3 {
                    out[3 * t + r] -= s[r];
                    out[3 * b + r] += s[r];
                }
            }
        }
    }

    /// Index of the free node carrying node `idx`, if it is not pinned.
    pub fn restrict_index(&self, idx: usize) -> Option<usize> {
        self.node_dof[idx]
    }

    /// Free unknowns reproducing `u` (exact when `u` is admissible).
    pub fn restrict(&self, u: &[Vec3]) -> Vec<f64> {
        let mut x = vec![0.0; self.len()];
        for (idx, v) in u.iter().enumerate() {
            if let Some(d) = self.node_dof[idx] {
                if self.mesh.canonical_node(idx) == idx {
                    x[3 * d..3 * d + 3].copy_from_slice(v.as_slice());
                }
            }
        }
        x
    }
}

/// Nodal vector `ℓ` with `Σ ℓ_n · u_n = ∫ f · u` for trilinear `u`.
pub fn volume_load_vector(
    mesh: &CellMesh,
    rule: &QuadratureRule,
    f: impl Fn([f64; 3]) -> Vec3,
) -> Vec<Vec3> {
    let table = ShapeTable::new(mesh, rule);
    let h = mesh.spacing();
    let mut out = vec![Vec3::zeros(); mesh.node_count()];
    for e in 0..mesh.element_count() {
        let o = mesh.element_origin(e);
        let nodes = mesh.element_nodes(e);
        for (q, p) in rule.points.iter().enumerate() {
            let load = f([0, 1, 2].map(|d| o[d] + h[d] * p[d])) * table.weights[q];
            for a in 0..8 {
                out[nodes[a]] += load * table.values[q][a];
            }
        }
    }
    out
}

/// Nodal vector for `∫ g · u` over the top (`x₃` maximal) or bottom face,
/// using 2×2 Gauss points per face; `g` receives the in-plane coordinates.
pub fn surface_load_vector(mesh: &CellMesh, top: bool, g: impl Fn([f64; 2]) -> Vec3) -> Vec<Vec3> {
    let h = mesh.spacing();
    let [n1, n2, n3] = mesh.n();
    let k = if top { n3 } else { 0 };
    let gp = 0.5 / 3f64.sqrt();
    let pts = [0.5 - gp, 0.5 + gp];
    let area = h[0] * h[1] * 0.25;
    let (lo, _) = mesh.domain().bounds();
    let mut out = vec![Vec3::zeros(); mesh.node_count()];
    for j in 0..n2 {
        for i in 0..n1 {
            for t in pts {
                for s in pts {
                    let x = [lo[0] + h[0] * (i as f64 + s), lo[1] + h[1] * (j as f64 + t)];
                    let load = g(x) * area;
                    let shape = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
                    for (a, n) in shape.iter().enumerate() {
                        out[mesh.node_index(i + (a & 1), j + (a >> 1), k)] += load * *n;
                    }
                }
            }
        }
    }
    out
}

/// How material points are attached to quadrature points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum XMode {
    /// `x_α` frozen, `x₃` taken from the quadrature point.
    Frozen { x_alpha: [f64; 2] },
    /// Both taken from the quadrature point.
    Full,
    /// A single material point for the whole mesh.
    Point { x: MaterialPoint },
}

/// `prefactor · ∫ a(x) w(offset + join(D_α u, s D₃u))` and its nodal gradient.
pub struct EnergyAssembler<'a> {
    mesh: CellMesh,
    table: ShapeTable,
    coeff: Vec<f64>,
    energy: &'a dyn PointEnergy,
    scale: f64,
    prefactor: f64,
    offset: Mat3,
}

const PARALLEL_ELEMENTS: usize = 512;

impl<'a> EnergyAssembler<'a> {
    /// Uses the base energy of `w`, with its modulation evaluated per
    /// quadrature point.
    pub fn new(
        mesh: &CellMesh,
        rule: &QuadratureRule,
        w: &'a StoredEnergyDensity,
        x_mode: XMode,
        scale: f64,
        prefactor: f64,
    ) -> Result<Self, FieldError> {
        Self::with_point_energy(mesh, rule, w, w.base(), x_mode, scale, prefactor)
    }

    /// Uses `energy` in place of the base energy of `w`; only the modulation
    /// of `w` is read.
    pub fn with_point_energy(
        mesh: &CellMesh,
        rule: &QuadratureRule,
        w: &StoredEnergyDensity,
        energy: &'a dyn PointEnergy,
        x_mode: XMode,
        scale: f64,
        prefactor: f64,
    ) -> Result<Self, FieldError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(FieldError::InvalidMesh(format!("transverse scale must be positive, got {scale}")));
        }
        let table = ShapeTable::new(mesh, rule);
        let h = mesh.spacing();
        let mut coeff = Vec::with_capacity(mesh.element_count() * rule.len());
        for e in 0..mesh.element_count() {
            let o = mesh.element_origin(e);
            for p in &rule.points {
                let x = [0, 1, 2].map(|d| o[d] + h[d] * p[d]);
                let mp = match x_mode {
                    XMode::Frozen { x_alpha } => MaterialPoint::new(x_alpha, x[2]),
                    XMode::Full => MaterialPoint::new([x[0], x[1]], x[2]),
                    XMode::Point { x } => x,
                };
                coeff.push(w.coefficient(&mp)?);
            }
        }
        Ok(Self {
            mesh: mesh.clone(),
            table,
            coeff,
            energy,
            scale,
            prefactor,
            offset: Mat3::zeros(),
        })
    }

    /// A constant matrix added to every scaled gradient (the affine lift).
    pub fn with_offset(mut self, offset: Mat3) -> Self {
        self.offset = offset;
        self
    }

    pub fn set_offset(&mut self, offset: Mat3) {
        self.offset = offset;
    }

    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub fn mesh(&self) -> &CellMesh {
        &self.mesh
    }

    fn element(&self, u: &[Vec3], e: usize, grad: bool) -> Result<(f64, [Vec3; 8]), IntegrandError> {
        let nodes = self.mesh.element_nodes(e);
        let nq = self.table.weights.len();
        let mut energy = 0.0;
        let mut g = [Vec3::zeros(); 8];
        for q in 0..nq {
            let dn = &self.table.grads[q];
            let f = self.offset + gradient_at(u, &nodes, dn, self.scale);
            let c = self.prefactor * self.table.weights[q] * self.coeff[e * nq + q];
            if grad {
                let (w, s) = self.energy.energy_stress(&f)?;
                energy += c * w;
                for a in 0..8 {
                    let d = Vec3::new(dn[a][0], dn[a][1], self.scale * dn[a][2]);
                    g[a] += (s * d) * c;
                }
            } else {
                energy += c * self.energy.energy(&f)?;
            }
        }
        Ok((energy, g))
    }

    pub fn energy(&self, u: &[Vec3]) -> Result<f64, IntegrandError> {
        let ne = self.mesh.element_count();
        let parts: Vec<f64> = if ne >= PARALLEL_ELEMENTS {
            (0..ne)
                .into_par_iter()
                .map(|e| self.element(u, e, false).map(|r| r.0))
                .collect::<Result<_, _>>()?
        } else {
            (0..ne)
                .map(|e| self.element(u, e, false).map(|r| r.0))
                .collect::<Result<_, _>>()?
        };
        Ok(parts.iter().sum())
    }

    /// Energy and nodal gradient; summation order is fixed, so results do not
    /// depend on the thread count.
    pub fn energy_gradient(&self, u: &[Vec3], grad: &mut [Vec3]) -> Result<f64, IntegrandError> {
        let ne = self.mesh.element_count();
        let parts: Vec<(f64, [Vec3; 8])> = if ne >= PARALLEL_ELEMENTS {
            (0..ne)
                .into_par_iter()
                .map(|e| self.element(u, e, true))
                .collect::<Result<_, _>>()?
        } else {
            (0..ne).map(|e| self.element(u, e, true)).collect::<Result<_, _>>()?
        };
        grad.iter_mut().for_each(|g| *g = Vec3::zeros());
        let mut total = 0.0;
        for (e, (w, g)) in parts.iter().enumerate() {
            total += w;
            for (a, n) in self.mesh.element_nodes(e).iter().enumerate() {
                grad[*n] += g[a];
            }
        }
        Ok(total)
    }

    /// `prefactor · ∫ a(x) DW(offset + scaled gradient)`: the derivative of
    /// the energy with respect to the offset.
    pub fn stress_integral(&self, u: &[Vec3]) -> Result<Mat3, IntegrandError> {
        let nq = self.table.weights.len();
        let mut total = Mat3::zeros();
        for e in 0..self.mesh.element_count() {
            let nodes = self.mesh.element_nodes(e);
            for q in 0..nq {
                let f = self.offset + gradient_at(u, &nodes, &self.table.grads[q], self.scale);
                let c = self.prefactor * self.table.weights[q] * self.coeff[e * nq + q];
                total += self.energy.energy_stress(&f)?.1 * c;
            }
        }
        Ok(total)
    }

    /// Objective over free unknowns, for the descent routines.
    pub fn reduced<'b>(&'b self, dofs: &'b DofMap) -> ReducedEnergy<'a, 'b> {
        ReducedEnergy {
            assembler: self,
            dofs,
            u: vec![Vec3::zeros(); self.mesh.node_count()],
            g: vec![Vec3::zeros(); self.mesh.node_count()],
        }
    }
}

/// An [`EnergyAssembler`] composed with a [`DofMap`].
pub struct ReducedEnergy<'a, 'b> {
    assembler: &'b EnergyAssembler<'a>,
    dofs: &'b DofMap,
    u: Vec<Vec3>,
    g: Vec<Vec3>,
}

impl ReducedEnergy<'_, '_> {
    pub fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64, IntegrandError> {
        self.dofs.expand(x, &mut self.u);
        let e = self.assembler.energy_gradient(&self.u, &mut self.g)?;
        self.dofs.pull_back(&self.g, grad);
        Ok(e)
    }

    pub fn value(&mut self, x: &[f64]) -> Result<f64, IntegrandError> {
        self.dofs.expand(x, &mut self.u);
        self.assembler.energy(&self.u)
    }
}

/// `prefactor · ∫ W(x; scaled gradient of u)`.
pub fn energy_integral(
    w: &StoredEnergyDensity,
    u: &DiscreteField,
    scale: f64,
    prefactor: f64,
    x_mode: XMode,
    offset: Mat3,
) -> Result<f64, FieldError> {
    let asm = EnergyAssembler::new(u.mesh(), &QuadratureRule::gauss2(), w, x_mode, scale, prefactor)?
        .with_offset(offset);
    Ok(asm.energy(u.values())?)
}

/// Gradient of [`energy_integral`] with respect to the nodal values, zeroed on
/// pinned nodes and accumulated onto representatives of identified nodes.
pub fn energy_gradient(
    w: &StoredEnergyDensity,
    u: &DiscreteField,
    scale: f64,
    prefactor: f64,
    x_mode: XMode,
    offset: Mat3,
) -> Result<(f64, DiscreteField), FieldError> {
    let mesh = u.mesh();
    let asm = EnergyAssembler::new(mesh, &QuadratureRule::gauss2(), w, x_mode, scale, prefactor)?
        .with_offset(offset);
    let mut g = vec![Vec3::zeros(); mesh.node_count()];
    let e = asm.energy_gradient(u.values(), &mut g)?;
    let mut out = vec![Vec3::zeros(); mesh.node_count()];
    for idx in 0..mesh.node_count() {
        if mesh.pinned_value(idx).is_none() {
            out[mesh.canonical_node(idx)] += g[idx];
        }
    }
    Ok((e, DiscreteField::from_values(mesh, out)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(n: usize, b: BoundaryMode) -> CellMesh {
        CellMesh::unit_cell(n, b).unwrap()
    }

    #[test]
    fn weights_sum_to_measure() {
        let m = cell(3, BoundaryMode::LateralZero);
        assert!((QuadratureRule::gauss2().total_weight(&m) - 2.0).abs() < 1e-12);
        assert!((QuadratureRule::midpoint().total_weight(&m) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn affine_field_has_constant_gradient() {
        let m = cell(2, BoundaryMode::LateralPeriodic);
        let fb = Mat3x2::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let u = DiscreteField::from_values(
            &m,
            (0..m.node_count())
                .map(|i| {
                    let x = m.node_coords(i);
                    fb * nalgebra::Vector2::new(x[0], x[1])
                })
                .collect(),
        )
        .unwrap();
        for g in u.scaled_gradient(7.0, &QuadratureRule::gauss2()) {
            assert!((g - crate::join(&fb, &Vec3::zeros())).amax() < 1e-12);
        }
    }

    #[test]
    fn periodic_identification_is_bitwise() {
        let m = cell(3, BoundaryMode::Periodic);
        let u = DiscreteField::from_fn(&m, |x| Vec3::new(x[0].sin(), x[1] * x[2], 1.0));
        assert_eq!(u.boundary_defect(), 0.0);
        let i0 = m.node_index(0, 1, 2);
        let i1 = m.node_index(3, 1, 2);
        assert_eq!(u.values()[i0], u.values()[i1]);
    }

    #[test]
    fn dofmap_roundtrip() {
        for b in [
            BoundaryMode::LateralZero,
            BoundaryMode::LateralPeriodic,
            BoundaryMode::AllZero,
            BoundaryMode::Periodic,
        ] {
            let m = cell(3, b);
            let u = DiscreteField::from_fn(&m, |x| Vec3::new(x[0] * x[1], x[2], (x[0] + x[2]).cos()));
            let d = DofMap::new(&m);
            let x = d.restrict(u.values());
            let mut back = vec![Vec3::zeros(); m.node_count()];
            d.expand(&x, &mut back);
            assert_eq!(back, u.values());
        }
    }

    #[test]
    fn zero_mean_jump_projection() {
        let m = cell(3, BoundaryMode::LateralPeriodic);
        let d = DofMap::new(&m).with_zero_mean_jump().unwrap();
        let x: Vec<f64> = (0..d.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let mut u = vec![Vec3::zeros(); m.node_count()];
        d.expand(&x, &mut u);
        let f = DiscreteField::from_values(&m, u).unwrap();
        assert!(f.mean_transverse_average(1.0).amax() < 1e-14);
    }

    #[test]
    fn transverse_average_of_linear_profile() {
        let m = cell(4, BoundaryMode::LateralPeriodic);
        let z = Vec3::new(1.0, -2.0, 0.5);
        let u = DiscreteField::from_fn(&m, |x| z * x[2]);
        for v in u.transverse_average(0.5) {
            assert!((v - z).amax() < 1e-14);
        }
    }

    #[test]
    fn refine_composes() {
        let m = cell(2, BoundaryMode::LateralZero);
        assert_eq!(m.refine().refine().n(), [8, 8, 8]);
        assert_eq!(m.refinement_ratio(&m.refine().refine()).unwrap(), [4, 4, 4]);
        let odd = CellMesh::new([3, 4, 4], Domain::UnitCell, BoundaryMode::LateralZero).unwrap();
        assert_eq!(m.refinement_ratio(&odd), Err(FieldError::NotNested));
    }
}
