//! TOML run configuration.
//!
//! Every block is optional and every field has a default, so an empty file is
//! a valid config. Unknown keys are rejected with their full path.

use std::path::{Path, PathBuf};

use filmrelax::field::{BoundaryMode, CellMesh, Domain};
use filmrelax::tabulate::{ParamAxis, SampleGrid};
use filmrelax::{
    BaseEnergy, CellProblemSpec, GrowthSpec, InnerSolverConfig, LSearchConfig, LoadSystem,
    MaterialPoint, Mat3, Mat3x2, Modulation, Rect, StoredEnergyDensity, TableKind, ThinFilmProblem,
    Vec3,
};
use serde::{Deserialize, Serialize};

use crate::checks::CheckName;
use crate::presets::Preset;
use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stochastic choice (multistart, check sampling).
    pub seed: u64,
    pub integrand: IntegrandConfig,
    pub cell: CellConfig,
    pub qcx: QcxConfig,
    pub gamma: GammaConfig,
    pub tabulate: TabulateConfig,
    pub check: CheckConfig,
    pub output: OutputConfig,
}

/// A preset, optionally overridden field by field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrandConfig {
    pub preset: Preset,
    /// Replaces the preset's base energy.
    pub base: Option<BaseEnergy>,
    /// Replaces the preset's modulation.
    pub modulation: Option<Modulation>,
    /// Overrides the derived growth constants without re-verifying them.
    pub growth: Option<GrowthSpec>,
    pub omega: Option<Rect>,
}

impl Default for IntegrandConfig {
    fn default() -> Self {
        Self {
            preset: Preset::SquaredNorm,
            base: None,
            modulation: None,
            growth: None,
            omega: None,
        }
    }
}

impl IntegrandConfig {
    pub fn resolve(&self) -> Result<StoredEnergyDensity, CliError> {
        let base = self.base.clone().unwrap_or_else(|| self.preset.base());
        let modulation = self.modulation.clone().unwrap_or_else(|| self.preset.modulation());
        let mut w = StoredEnergyDensity::new(base)?.with_modulation(modulation)?;
        if let Some(g) = self.growth {
            w = w.with_growth(g)?;
        }
        if let Some(r) = self.omega {
            w = w.with_omega(r)?;
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    pub x_alpha: [f64; 2],
    /// `F̄` row by row.
    pub f_bar: [[f64; 2]; 3],
    /// Cosserat vector for `cosserat`.
    pub z: [f64; 3],
    pub cells: usize,
    pub tol: f64,
    pub l_search: LSearchConfig,
    /// `inner.seed` is replaced by the run seed.
    pub inner: InnerSolverConfig,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            x_alpha: [0.5, 0.5],
            f_bar: [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
            z: [0.0; 3],
            cells: 8,
            tol: 1e-4,
            l_search: LSearchConfig::default(),
            inner: InnerSolverConfig::default(),
        }
    }
}

impl CellConfig {
    /// Membrane spec at the configured point with `cells³` elements.
    pub fn spec(&self, seed: u64, cells: usize) -> Result<CellProblemSpec, CliError> {
        let inner = InnerSolverConfig { seed, ..self.inner };
        Ok(CellProblemSpec::new(MaterialPoint::new(self.x_alpha, 0.0), rows2(&self.f_bar))
            .with_cells(cells)?
            .with_l_search(self.l_search)
            .with_inner(inner)
            .with_tol(self.tol))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CubeBoundary {
    Periodic,
    AllZero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcxConfig {
    pub x: [f64; 3],
    pub f: [[f64; 3]; 3],
    pub cells: usize,
    pub boundary: CubeBoundary,
}

impl Default for QcxConfig {
    fn default() -> Self {
        Self {
            x: [0.5, 0.5, 0.0],
            f: [[0.0; 3]; 3],
            cells: 4,
            boundary: CubeBoundary::Periodic,
        }
    }
}

impl QcxConfig {
    pub fn point(&self) -> MaterialPoint {
        MaterialPoint::new([self.x[0], self.x[1]], self.x[2])
    }

    pub fn mesh(&self) -> Result<CellMesh, CliError> {
        let b = match self.boundary {
            CubeBoundary::Periodic => BoundaryMode::Periodic,
            CubeBoundary::AllZero => BoundaryMode::AllZero,
        };
        Ok(CellMesh::new([self.cells; 3], Domain::UnitCube, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Cell solves at every quadrature point, cached.
    Cell,
    /// Interpolation in a table written by `tabulate`.
    Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaConfig {
    pub omega: Rect,
    pub f_bc: [[f64; 2]; 3],
    pub epsilons: Vec<f64>,
    pub cells: [usize; 2],
    pub transverse_cells: usize,
    #[serde(default = "LoadSystem::zero")]
    pub loads: LoadSystem,
    pub source: SourceKind,
    /// Table file for `source = "table"`; relative paths resolve against the
    /// output directory.
    pub table: PathBuf,
    /// Cell mesh of the cell-solve source (tolerances come from `[cell]`).
    pub source_cells: usize,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            omega: Rect::unit(),
            f_bc: [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
            epsilons: vec![1.0, 0.5, 0.25, 0.125],
            cells: [8, 8],
            transverse_cells: 8,
            loads: LoadSystem::zero(),
            source: SourceKind::Cell,
            table: PathBuf::from("density.table"),
            source_cells: 4,
        }
    }
}

impl GammaConfig {
    pub fn problem(&self, w: &StoredEnergyDensity, inner: InnerSolverConfig) -> ThinFilmProblem {
        let mut p = ThinFilmProblem::new(w.clone(), self.omega, rows2(&self.f_bc), self.epsilons.clone())
            .with_loads(self.loads.clone())
            .with_cells(self.cells, self.transverse_cells);
        p.inner = inner;
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabulateConfig {
    pub kind: TableKind,
    pub grid: SampleGrid,
    /// Output file name inside the output directory.
    pub file: PathBuf,
    pub cells: usize,
    /// Write completed nodes to `<file>.partial` and resume from it.
    pub checkpoint: bool,
}

impl Default for TabulateConfig {
    fn default() -> Self {
        let f = Mat3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        Self {
            kind: TableKind::Membrane,
            grid: SampleGrid::frozen([0.5, 0.5], &f).with_axis(ParamAxis::f_entry(0, 0, 0.5, 1.5, 5)),
            file: PathBuf::from("density.table"),
            cells: 4,
            checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Checks to run, in order; an empty list runs nothing.
    pub checks: Vec<CheckName>,
    /// Sample count of the inexpensive pointwise checks.
    pub samples: usize,
    /// Sample count of the checks that solve cell problems.
    pub cell_samples: usize,
    pub cells: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            checks: CheckName::ALL.to_vec(),
            samples: 100,
            cell_samples: 3,
            cells: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Export {
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub export: Vec<Export>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("filmrelax-out"),
            export: Vec::new(),
        }
    }
}

pub fn rows2(r: &[[f64; 2]; 3]) -> Mat3x2 {
    Mat3x2::new(r[0][0], r[0][1], r[1][0], r[1][1], r[2][0], r[2][1])
}

pub fn vec3(v: &[f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

pub fn rows3(r: &[[f64; 3]; 3]) -> Mat3 {
    filmrelax::integrand::from_rows(r)
}

/// Parses a config, naming the offending key on failure.
pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config {
        path: String::new(),
        message: e.to_string(),
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse(&text)
}
