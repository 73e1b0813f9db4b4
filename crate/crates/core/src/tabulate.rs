//! Tables of effective densities on parameter grids.
//!
//! A [`SampleGrid`] spans in-plane points (one frozen point or a tensor grid)
//! and affine parameter axes in `(F̄, z)` space: node `t` of the parameter
//! axes corresponds to `F̄ = F̄₀ + Σ t_k F̄_k`, `z = z₀ + Σ t_k z_k`. Values are
//! stored row-major with the last axis fastest; queries interpolate
//! multilinearly and refuse to extrapolate.
//!
//! # File format
//!
//! A text header of `key: value` lines, terminated by `end-header`, followed by
//! the values as little-endian `f64` and one status byte per node
//! (`0` pending, `1` valid, `2` failed):
//!
//! ```text
//! filmrelax-table
//! format-version: 1
//! kind: cosserat
//! integrand-hash: 3f2a…
//! solver-version: filmrelax-0.1.0
//! in-plane-uniform: true
//! mesh: 8x8x8
//! tol: 0.0001
//! grad-tol: 1e-8
//! nodes: 25
//! grid: {"x":{"kind":"frozen","x_alpha":[0.5,0.5]},…}
//! end-header
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{cosserat_density_with, membrane_density, CellError, CellProblemSpec, QuasiconvexSurrogate};
use crate::integrand::{join, Mat3, Mat3x2, MaterialPoint, StoredEnergyDensity, Vec3};
use crate::SOLVER_VERSION;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "filmrelax-table";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed table file: {0}")]
    Parse(String),
    #[error("table format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("table was built for integrand {found}, expected {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("query lies off the tabulated slice (residual {residual:e})")]
    OffSlice { residual: f64 },
    #[error("query coordinate {value} on axis {axis} outside [{min}, {max}]; extrapolation is not supported")]
    Extrapolation { axis: usize, value: f64, min: f64, max: f64 },
    #[error("interpolation touches failed node {0}")]
    InvalidNode(usize),
    #[error("node {node}: value {value} outside growth bounds [{lower}, {upper}]")]
    GrowthViolation { node: usize, value: f64, lower: f64, upper: f64 },
    #[error("table kind mismatch: {0}")]
    KindMismatch(String),
    #[error(transparent)]
    Cell(#[from] CellError),
}

impl From<std::io::Error> for TableError {
    fn from(e: std::io::Error) -> Self {
        TableError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableKind {
    /// The membrane density over `(x_α, F̄)`.
    Membrane,
    /// The Cosserat density over `(x_α, F̄, z)`.
    Cosserat,
}

impl TableKind {
    fn name(&self) -> &'static str {
        match self {
            TableKind::Membrane => "membrane",
            TableKind::Cosserat => "cosserat",
        }
    }

    fn parse(s: &str) -> Result<Self, TableError> {
        match s {
            "membrane" => Ok(TableKind::Membrane),
            "cosserat" => Ok(TableKind::Cosserat),
            other => Err(TableError::Parse(format!("unknown table kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[serde(deny_unknown_fields)]
pub enum XSamples {
    Frozen { x_alpha: [f64; 2] },
    /// Tensor grid; both coordinate lists strictly increasing with >= 2 entries.
    Grid { x1: Vec<f64>, x2: Vec<f64> },
}

/// One affine parameter direction; `f_dir` is given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamAxis {
    #[serde(default)]
    pub f_dir: [[f64; 2]; 3],
    #[serde(default)]
    pub z_dir: [f64; 3],
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl ParamAxis {
    pub fn f_entry(row: usize, col: usize, min: f64, max: f64, count: usize) -> Self {
        let mut f_dir = [[0.0; 2]; 3];
        f_dir[row][col] = 1.0;
        Self {
            f_dir,
            z_dir: [0.0; 3],
            min,
            max,
            count,
        }
    }

    pub fn z_entry(i: usize, min: f64, max: f64, count: usize) -> Self {
        let mut z_dir = [0.0; 3];
        z_dir[i] = 1.0;
        Self {
            f_dir: [[0.0; 2]; 3],
            z_dir,
            min,
            max,
            count,
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        let n = self.count - 1;
        (0..self.count)
            .map(|i| match i {
                0 => self.min,
                _ if i == n => self.max,
                _ => self.min + (self.max - self.min) * i as f64 / n as f64,
            })
            .collect()
    }
}

fn rows_to_mat(r: &[[f64; 2]; 3]) -> Mat3x2 {
    Mat3x2::new(r[0][0], r[0][1], r[1][0], r[1][1], r[2][0], r[2][1])
}

pub fn mat_to_rows(m: &Mat3x2) -> [[f64; 2]; 3] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]], [m[(2, 0)], m[(2, 1)]]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleGrid {
    pub x: XSamples,
    pub f_base: [[f64; 2]; 3],
    #[serde(default)]
    pub z_base: [f64; 3],
    #[serde(default)]
    pub axes: Vec<ParamAxis>,
}

impl SampleGrid {
    pub fn frozen(x_alpha: [f64; 2], f_base: &Mat3x2) -> Self {
        Self {
            x: XSamples::Frozen { x_alpha },
            f_base: mat_to_rows(f_base),
            z_base: [0.0; 3],
            axes: vec![],
        }
    }

    pub fn with_z_base(mut self, z: &Vec3) -> Self {
        self.z_base = [z[0], z[1], z[2]];
        self
    }

    pub fn with_axis(mut self, axis: ParamAxis) -> Self {
        self.axes.push(axis);
        self
    }

    pub fn validate(&self) -> Result<(), TableError> {
        if let XSamples::Grid { x1, x2 } = &self.x {
            for c in [x1, x2] {
                if c.len() < 2 || c.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(TableError::Grid(
                        "x grid axes need >= 2 strictly increasing coordinates".into(),
                    ));
                }
            }
        }
        for (k, a) in self.axes.iter().enumerate() {
            if a.count < 2 || !(a.min < a.max) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(TableError::Grid(format!("axis {k} needs count >= 2 and min < max")));
            }
            let norm: f64 = a.f_dir.iter().flatten().chain(&a.z_dir).map(|v| v * v).sum();
            if norm == 0.0 {
                return Err(TableError::Grid(format!("axis {k} has a zero direction")));
            }
        }
        Ok(())
    }

    /// Coordinates per interpolation dimension: `x₁, x₂` (grid only), then the axes.
    pub fn dims(&self) -> Vec<Vec<f64>> {
        let mut d = Vec::new();
        if let XSamples::Grid { x1, x2 } = &self.x {
            d.push(x1.clone());
            d.push(x2.clone());
        }
        d.extend(self.axes.iter().map(ParamAxis::nodes));
        d
    }

    pub fn node_count(&self) -> usize {
        self.dims().iter().map(Vec::len).product()
    }

    fn x_dims(&self) -> usize {
        match self.x {
            XSamples::Frozen { .. } => 0,
            XSamples::Grid { .. } => 2,
        }
    }

    /// Multi-index of a flat node index (last dimension fastest).
    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let dims = self.dims();
        let mut idx = vec![0; dims.len()];
        for d in (0..dims.len()).rev() {
            idx[d] = node % dims[d].len();
            node /= dims[d].len();
        }
        idx
    }

    /// In-plane point, `F̄` and `z` of a node.
    pub fn node_point(&self, node: usize) -> ([f64; 2], Mat3x2, Vec3) {
        let dims = self.dims();
        let idx = self.multi_index(node);
        let x = match &self.x {
            XSamples::Frozen { x_alpha } => *x_alpha,
            XSamples::Grid { .. } => [dims[0][idx[0]], dims[1][idx[1]]],
        };
        let params: Vec<f64> = (self.x_dims()..dims.len()).map(|d| dims[d][idx[d]]).collect();
        let (f, z) = self.point_from_params(&params);
        (x, f, z)
    }

    pub fn point_from_params(&self, t: &[f64]) -> (Mat3x2, Vec3) {
        let mut f = rows_to_mat(&self.f_base);
        let mut z = Vec3::from(self.z_base);
        for (a, tk) in self.axes.iter().zip(t) {
            f += rows_to_mat(&a.f_dir) * *tk;
            z += Vec3::from(a.z_dir) * *tk;
        }
        (f, z)
    }

    /// Parameter coordinates of `(F̄, z)`, or an off-slice error.
    fn params(&self, kind: TableKind, f: &Mat3x2, z: &Vec3) -> Result<Vec<f64>, TableError> {
        let rows = if kind == TableKind::Cosserat { 9 } else { 6 };
        let pack = |f: &Mat3x2, z: &Vec3| -> DVector<f64> {
            let mut v = DVector::zeros(rows);
            for i in 0..3 {
                for j in 0..2 {
                    v[2 * i + j] = f[(i, j)];
                }
                if rows == 9 {
                    v[6 + i] = z[i];
                }
            }
            v
        };
        let (f0, z0) = self.point_from_params(&vec![0.0; self.axes.len()]);
        let r = pack(&(f - f0), &(z - z0));
        if self.axes.is_empty() {
            let residual = r.norm();
            return if residual <= 1e-9 * (1.0 + pack(f, z).norm()) {
                Ok(vec![])
            } else {
                Err(TableError::OffSlice { residual })
            };
        }
        let mut d = DMatrix::zeros(rows, self.axes.len());
        for (k, a) in self.axes.iter().enumerate() {
            d.set_column(k, &pack(&rows_to_mat(&a.f_dir), &Vec3::from(a.z_dir)));
        }
        let t = d
            .clone()
            .svd(true, true)
            .solve(&r, 1e-12)
            .map_err(|e| TableError::Grid(e.to_string()))?;
        let residual = (&d * &t - &r).norm();
        if residual > 1e-9 * (1.0 + pack(f, z).norm()) {
            return Err(TableError::OffSlice { residual });
        }
        Ok(t.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub integrand_hash: String,
    pub mesh: [usize; 3],
    pub tol: f64,
    pub grad_tol: f64,
    pub solver_version: String,
    /// The integrand does not depend on `x_α`, so a frozen in-plane point
    /// stands for every point.
    pub in_plane_uniform: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeState {
    Pending = 0,
    Valid = 1,
    Failed = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    kind: TableKind,
    grid: SampleGrid,
    provenance: Provenance,
    values: Vec<f64>,
    state: Vec<NodeState>,
}

/// Progress callback: `(completed, total)`.
pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

const CHECKPOINT_BATCH: usize = 16;

impl DensityTable {
    pub fn kind(&self) -> TableKind {
        self.kind
    }

    pub fn grid(&self) -> &SampleGrid {
        &self.grid
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_valid(&self, node: usize) -> bool {
        self.state[node] == NodeState::Valid
    }

    pub fn invalid_count(&self) -> usize {
        self.state.iter().filter(|s| **s != NodeState::Valid).count()
    }

    pub fn is_complete(&self) -> bool {
        !self.state.contains(&NodeState::Pending)
    }

    /// Builds the table, one cell solve per node, in parallel over nodes.
    ///
    /// With a checkpoint path, completed nodes are written there in batches and
    /// a compatible partial file found at start is resumed. Failed solves mark
    /// the node invalid; a value outside the growth bounds is an error.
    pub fn build(
        w: &StoredEnergyDensity,
        grid: &SampleGrid,
        kind: TableKind,
        template: &CellProblemSpec,
        checkpoint: Option<&Path>,
        progress: Option<Progress<'_>>,
    ) -> Result<DensityTable, TableError> {
        grid.validate()?;
        let n = grid.node_count();
        let provenance = Provenance {
            integrand_hash: w.hash(),
            mesh: template.mesh.n(),
            tol: template.tol,
            grad_tol: template.inner.grad_tol,
            solver_version: SOLVER_VERSION.to_string(),
            in_plane_uniform: !w.modulation().depends_on_x_alpha(),
        };
        let mut table = DensityTable {
            kind,
            grid: grid.clone(),
            provenance,
            values: vec![f64::NAN; n],
            state: vec![NodeState::Pending; n],
        };
        if let Some(path) = checkpoint {
            if path.exists() {
                let old = DensityTable::load(path, Some(&table.provenance.integrand_hash))?;
                if old.kind == kind && old.grid == table.grid && old.provenance == table.provenance {
                    table.values = old.values;
                    table.state = old.state;
                    log::info!("resuming table build: {} of {n} nodes done", n - table.pending().len());
                } else {
                    log::warn!("checkpoint {} does not match this build; starting over", path.display());
                }
            }
        }
        let qw = QuasiconvexSurrogate::new(w.base(), &template.inner)?;
        let pending = table.pending();
        let batch = if checkpoint.is_some() { CHECKPOINT_BATCH } else { pending.len().max(1) };
        for chunk in pending.chunks(batch) {
            let results: Vec<Result<f64, CellError>> = chunk
                .par_iter()
                .map(|&node| table.solve_node(w, template, &qw, node))
                .collect();
            for (&node, r) in chunk.iter().zip(results) {
                match r {
                    Ok(v) => {
                        table.values[node] = v;
                        table.state[node] = NodeState::Valid;
                    }
                    Err(e) => {
                        log::warn!("table node {node} failed: {e}");
                        table.values[node] = f64::NAN;
                        table.state[node] = NodeState::Failed;
                    }
                }
            }
            if let Some(path) = checkpoint {
                table.save(path)?;
            }
            if let Some(p) = progress {
                p(n - table.pending().len(), n);
            }
        }
        table.check_growth(w)?;
        Ok(table)
    }

    fn pending(&self) -> Vec<usize> {
        (0..self.state.len())
            .filter(|i| self.state[*i] == NodeState::Pending)
            .collect()
    }

    fn solve_node(
        &self,
        w: &StoredEnergyDensity,
        template: &CellProblemSpec,
        qw: &QuasiconvexSurrogate,
        node: usize,
    ) -> Result<f64, CellError> {
        let (x, f, z) = self.grid.node_point(node);
        let mut spec = template.clone();
        spec.x0 = MaterialPoint::new(x, 0.0);
        spec.f_bar = f;
        spec.warm_start = None;
        Ok(match self.kind {
            TableKind::Membrane => membrane_density(w, &spec.without_z())?.value,
            TableKind::Cosserat => cosserat_density_with(w, &spec.with_z(z), qw)?.value,
        })
    }

    /// Every valid node must satisfy the growth bounds of `w`.
    pub fn check_growth(&self, w: &StoredEnergyDensity) -> Result<(), TableError> {
        let slack = self.provenance.tol;
        for node in 0..self.values.len() {
            if !self.is_valid(node) {
                continue;
            }
            let (_, f, z) = self.grid.node_point(node);
            let zn = if self.kind == TableKind::Cosserat { z.norm() } else { 0.0 };
            let (lower, upper) = w.growth().effective_bounds(f.norm(), zn);
            let v = self.values[node];
            let s = slack * v.abs().max(1.0);
            if v < lower - s || v > upper + s {
                return Err(TableError::GrowthViolation {
                    node,
                    value: v,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    /// Interpolated value at `(x_α, F̄, z)`; `z` is ignored for membrane tables.
    pub fn query(&self, x_alpha: [f64; 2], f: &Mat3x2, z: &Vec3) -> Result<f64, TableError> {
        Ok(self.interpolate(x_alpha, f, z, false)?.0)
    }

    /// Value and derivative with respect to `(F̄ | z)` along the tabulated
    /// directions (components off the slice are zero).
    pub fn query_gradient(&self, x_alpha: [f64; 2], f: &Mat3x2, z: &Vec3) -> Result<(f64, Mat3), TableError> {
        let (v, g) = self.interpolate(x_alpha, f, z, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn locate(&self, x_alpha: [f64; 2], f: &Mat3x2, z: &Vec3) -> Result<Vec<f64>, TableError> {
        let mut q = Vec::new();
        match &self.grid.x {
            XSamples::Frozen { x_alpha: x0 } => {
                let d = (x_alpha[0] - x0[0]).hypot(x_alpha[1] - x0[1]);
                if d > 1e-12 && !self.provenance.in_plane_uniform {
                    return Err(TableError::OffSlice { residual: d });
                }
            }
            XSamples::Grid { .. } => q.extend_from_slice(&x_alpha),
        }
        q.extend(self.grid.params(self.kind, f, z)?);
        Ok(q)
    }

    fn interpolate(
        &self,
        x_alpha: [f64; 2],
        f: &Mat3x2,
        z: &Vec3,
        gradient: bool,
    ) -> Result<(f64, Option<Mat3>), TableError> {
        let dims = self.grid.dims();
        let q = self.locate(x_alpha, f, z)?;
        let nd = dims.len();
        let mut cell = vec![0usize; nd];
        let mut t = vec![0.0; nd];
        let mut spacing = vec![1.0; nd];
        for d in 0..nd {
            let c = &dims[d];
            let (lo, hi) = (c[0], c[c.len() - 1]);
            let slack = 1e-12 * (hi - lo);
            let mut v = q[d];
            if v < lo - slack || v > hi + slack {
                return Err(TableError::Extrapolation {
                    axis: d,
                    value: v,
                    min: lo,
                    max: hi,
                });
            }
            v = v.clamp(lo, hi);
            let mut i = c.partition_point(|x| *x <= v).saturating_sub(1).min(c.len() - 2);
            let mut s = (v - c[i]) / (c[i + 1] - c[i]);
            // snap onto nodes so that nodal queries are exact
            if s.abs() <= 1e-10 {
                s = 0.0;
            } else if (1.0 - s).abs() <= 1e-10 {
                if i + 2 < c.len() {
                    i += 1;
                    s = 0.0;
                } else {
                    s = 1.0;
                }
            }
            cell[d] = i;
            t[d] = s;
            spacing[d] = c[i + 1] - c[i];
        }
        let strides: Vec<usize> = (0..nd)
            .map(|d| dims[d + 1..].iter().map(Vec::len).product())
            .collect();
        let mut value = 0.0;
        let mut dv = vec![0.0; nd];
        for corner in 0..(1usize << nd) {
            let mut node = 0;
            let mut weight = 1.0;
            for d in 0..nd {
                let bit = (corner >> d) & 1;
                node += (cell[d] + bit) * strides[d];
                weight *= if bit == 1 { t[d] } else { 1.0 - t[d] };
            }
            if weight == 0.0 && !gradient {
                continue;
            }
            let touches = weight != 0.0 || (0..nd).any(|d| {
                (0..nd)
                    .filter(|e| *e != d)
                    .all(|e| if (corner >> e) & 1 == 1 { t[e] != 0.0 } else { t[e] != 1.0 })
            });
            if !touches {
                continue;
            }
            if !self.is_valid(node) {
                return Err(TableError::InvalidNode(node));
            }
            let v = self.values[node];
            value += weight * v;
            if gradient {
                for d in 0..nd {
                    let mut g = if (corner >> d) & 1 == 1 { 1.0 } else { -1.0 } / spacing[d];
                    for e in 0..nd {
                        if e != d {
                            g *= if (corner >> e) & 1 == 1 { t[e] } else { 1.0 - t[e] };
                        }
                    }
                    dv[d] += g * v;
                }
            }
        }
        if !gradient {
            return Ok((value, None));
        }
        let mut grad = Mat3::zeros();
        for (k, a) in self.grid.axes.iter().enumerate() {
            let g = dv[self.grid.x_dims() + k];
            let dir = join(&rows_to_mat(&a.f_dir), &Vec3::from(a.z_dir));
            let n2 = dir.norm_squared();
            grad += dir * (g / n2);
        }
        Ok((value, Some(grad)))
    }

    /// Midpoint-convexity defects along pure-`z` axes: `(node, defect)` for
    /// every adjacent triple with `v_mid − ½(v_lo + v_hi) > tol`.
    pub fn z_convexity_defects(&self, tol: f64) -> Vec<(usize, f64)> {
        let dims = self.grid.dims();
        let nd = dims.len();
        let strides: Vec<usize> = (0..nd)
            .map(|d| dims[d + 1..].iter().map(Vec::len).product())
            .collect();
        let mut out = Vec::new();
        for (k, a) in self.grid.axes.iter().enumerate() {
            if a.f_dir.iter().flatten().any(|v| *v != 0.0) {
                continue;
            }
            let d = self.grid.x_dims() + k;
            for node in 0..self.values.len() {
                let i = self.grid.multi_index(node)[d];
                if i == 0 || i + 1 >= dims[d].len() {
                    continue;
                }
                let (lo, hi) = (node - strides[d], node + strides[d]);
                if ![lo, node, hi].iter().all(|n| self.is_valid(*n)) {
                    continue;
                }
                let defect = self.values[node] - 0.5 * (self.values[lo] + self.values[hi]);
                if defect > tol * self.values[node].abs().max(1.0) {
                    out.push((node, defect));
                }
            }
        }
        out
    }

    fn header(&self) -> String {
        let p = &self.provenance;
        format!(
            "{MAGIC}\nformat-version: {FORMAT_VERSION}\nkind: {}\nintegrand-hash: {}\nsolver-version: {}\nin-plane-uniform: {}\nmesh: {}x{}x{}\ntol: {:e}\ngrad-tol: {:e}\nnodes: {}\ngrid: {}\nend-header\n",
            self.kind.name(),
            p.integrand_hash,
            p.solver_version,
            p.in_plane_uniform,
            p.mesh[0],
            p.mesh[1],
            p.mesh[2],
            p.tol,
            p.grad_tol,
            self.values.len(),
            serde_json::to_string(&self.grid).expect("serializable grid"),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.state.iter().map(|s| *s as u8));
        out
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), TableError> {
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a table; with `expected_hash`, refuses tables built for another
    /// integrand.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<DensityTable, TableError> {
        Self::from_bytes(&fs::read(path)?, expected_hash)
    }

    pub fn from_bytes(bytes: &[u8], expected_hash: Option<&str>) -> Result<DensityTable, TableError> {
        const END: &[u8] = b"end-header\n";
        let end = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| TableError::Parse("missing end-header line".into()))?;
        let header = std::str::from_utf8(&bytes[..end])
            .map_err(|_| TableError::Parse("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(TableError::Parse("not a table file".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| TableError::Parse(format!("bad header line `{line}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| TableError::Parse(format!("missing header key `{k}`")))
        };
        let version = get("format-version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(TableError::VersionMismatch {
                found: version.to_string(),
                expected: FORMAT_VERSION,
            });
        }
        let hash = get("integrand-hash")?.to_string();
        if let Some(expected) = expected_hash {
            if hash != expected {
                return Err(TableError::HashMismatch {
                    found: hash,
                    expected: expected.to_string(),
                });
            }
        }
        let num = |k: &str| -> Result<f64, TableError> {
            get(k)?
                .parse()
                .map_err(|_| TableError::Parse(format!("bad number for `{k}`")))
        };
        let mesh: Vec<usize> = get("mesh")?
            .split('x')
            .map(|s| s.parse().map_err(|_| TableError::Parse("bad mesh".into())))
            .collect::<Result<_, _>>()?;
        if mesh.len() != 3 {
            return Err(TableError::Parse("mesh needs three counts".into()));
        }
        let grid: SampleGrid =
            serde_json::from_str(get("grid")?).map_err(|e| TableError::Parse(format!("grid: {e}")))?;
        grid.validate()?;
        let n: usize = get("nodes")?
            .parse()
            .map_err(|_| TableError::Parse("bad node count".into()))?;
        if n != grid.node_count() {
            return Err(TableError::Parse("node count does not match grid".into()));
        }
        let body = &bytes[end + END.len()..];
        if body.len() != 9 * n {
            return Err(TableError::Parse(format!(
                "expected {} data bytes, found {}",
                9 * n,
                body.len()
            )));
        }
        let values = body[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let state = body[8 * n..]
            .iter()
            .map(|b| match b {
                0 => Ok(NodeState::Pending),
                1 => Ok(NodeState::Valid),
                2 => Ok(NodeState::Failed),
                _ => Err(TableError::Parse(format!("bad node status byte {b}"))),
            })
            .collect::<Result<_, _>>()?;
        Ok(DensityTable {
            kind: TableKind::parse(get("kind")?)?,
            grid,
            provenance: Provenance {
                integrand_hash: hash,
                mesh: [mesh[0], mesh[1], mesh[2]],
                tol: num("tol")?,
                grad_tol: num("grad-tol")?,
                solver_version: get("solver-version")?.to_string(),
                in_plane_uniform: match get("in-plane-uniform")? {
                    "true" => true,
                    "false" => false,
                    other => return Err(TableError::Parse(format!("bad in-plane-uniform flag `{other}`"))),
                },
            },
            values,
            state,
        })
    }

    /// Node coordinates and values as CSV.
    pub fn write_csv(&self, w: impl Write) -> Result<(), TableError> {
        let mut out = csv::Writer::from_writer(w);
        let mut head: Vec<String> = vec!["node".into(), "x1".into(), "x2".into()];
        head.extend((0..self.grid.axes.len()).map(|k| format!("t{k}")));
        for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)] {
            head.push(format!("F{i}{j}"));
        }
        head.extend(["z1", "z2", "z3", "value", "valid"].map(String::from));
        out.write_record(&head).map_err(|e| TableError::Io(e.to_string()))?;
        let dims = self.grid.dims();
        let xd = self.grid.x_dims();
        for node in 0..self.values.len() {
            let (x, f, z) = self.grid.node_point(node);
            let idx = self.grid.multi_index(node);
            let mut rec = vec![node.to_string(), x[0].to_string(), x[1].to_string()];
            rec.extend((xd..dims.len()).map(|d| dims[d][idx[d]].to_string()));
            for i in 0..3 {
                for j in 0..2 {
                    rec.push(f[(i, j)].to_string());
                }
            }
            rec.extend(z.iter().map(|v| v.to_string()));
            rec.push(self.values[node].to_string());
            rec.push(self.is_valid(node).to_string());
            out.write_record(&rec).map_err(|e| TableError::Io(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_table() -> DensityTable {
        let grid = SampleGrid::frozen([0.5, 0.5], &Mat3x2::zeros())
            .with_axis(ParamAxis::f_entry(0, 0, -1.0, 1.0, 3))
            .with_axis(ParamAxis::z_entry(2, 0.0, 2.0, 5));
        let n = grid.node_count();
        let mut t = DensityTable {
            kind: TableKind::Cosserat,
            grid: grid.clone(),
            provenance: Provenance {
                integrand_hash: "abc".into(),
                mesh: [2, 2, 2],
                tol: 1e-4,
                grad_tol: 1e-8,
                solver_version: SOLVER_VERSION.into(),
                in_plane_uniform: false,
            },
            values: vec![0.0; n],
            state: vec![NodeState::Valid; n],
        };
        for node in 0..n {
            let (_, f, z) = grid.node_point(node);
            t.values[node] = 1.0 + 2.0 * f[(0, 0)] - 0.5 * z[2] + 3.0 * f[(0, 0)] * z[2];
        }
        t
    }

    #[test]
    fn multilinear_function_is_reproduced() {
        let t = affine_table();
        let f = Mat3x2::new(0.3, 0.0, 0.0, 0.0, 0.0, 0.0);
        let z = Vec3::new(0.0, 0.0, 1.3);
        let (v, g) = t.query_gradient([0.5, 0.5], &f, &z).unwrap();
        assert!((v - (1.0 + 0.6 - 0.65 + 3.0 * 0.39)).abs() < 1e-12);
        assert!((g[(0, 0)] - (2.0 + 3.0 * 1.3)).abs() < 1e-12);
        assert!((g[(2, 2)] - (-0.5 + 0.9)).abs() < 1e-12);
    }

    #[test]
    fn node_queries_are_exact() {
        let t = affine_table();
        for node in 0..t.values.len() {
            let (x, f, z) = t.grid.node_point(node);
            assert_eq!(t.query(x, &f, &z).unwrap(), t.values[node]);
        }
    }

    #[test]
    fn no_extrapolation_or_off_slice() {
        let t = affine_table();
        let z = Vec3::new(0.0, 0.0, 2.5);
        assert!(matches!(
            t.query([0.5, 0.5], &Mat3x2::zeros(), &z),
            Err(TableError::Extrapolation { .. })
        ));
        let f = Mat3x2::new(0.0, 0.1, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            t.query([0.5, 0.5], &f, &Vec3::zeros()),
            Err(TableError::OffSlice { .. })
        ));
    }

    #[test]
    fn bytes_roundtrip_and_guards() {
        let t = affine_table();
        let bytes = t.to_bytes();
        assert_eq!(DensityTable::from_bytes(&bytes, Some("abc")).unwrap(), t);
        assert!(matches!(
            DensityTable::from_bytes(&bytes, Some("def")),
            Err(TableError::HashMismatch { .. })
        ));
        assert!(matches!(
            DensityTable::from_bytes(&bytes[..bytes.len() - 3], None),
            Err(TableError::Parse(_))
        ));
        let text = String::from_utf8_lossy(&bytes).replace("format-version: 1", "format-version: 9");
        let mut altered = text.into_bytes();
        altered.truncate(t.header().len());
        altered.extend_from_slice(&bytes[t.header().len()..]);
        assert!(matches!(
            DensityTable::from_bytes(&altered, None),
            Err(TableError::VersionMismatch { .. })
        ));
    }
}
