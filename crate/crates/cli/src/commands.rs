//! One function per subcommand. Each returns a finished [`Report`]; writing
//! it out is left to the caller.

use std::path::{Path, PathBuf};

use filmrelax::cell::{cosserat_density, lamination_upper_bound, membrane_density, quasiconvexify, CellSolution};
use filmrelax::gamma::{convergence_study, CellSource, DensitySource, TableSource};
use filmrelax::integrand::to_rows;
use filmrelax::{DensityTable, InnerSolverConfig, Mat3, StoredEnergyDensity, TableKind};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checks::run_checks;
use crate::config::{rows3, vec3, RunConfig, SourceKind};
use crate::report::{Provenance, Report, Status};
use crate::CliError;

/// Where a command may read and write files.
#[derive(Debug, Clone)]
pub struct Context {
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into() }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }
}

fn inner(cfg: &RunConfig) -> InnerSolverConfig {
    InnerSolverConfig {
        seed: cfg.seed,
        ..cfg.cell.inner
    }
}

fn cell_result(sol: &CellSolution, bounds: (f64, f64)) -> Value {
    json!({
        "value": sol.value,
        "l_star": sol.l_star,
        "dual": to_rows(&sol.dual),
        "growth_bounds": [bounds.0, bounds.1],
        "diagnostics": sol.diagnostics,
    })
}

fn cell_warnings(cfg: &RunConfig, sol: &CellSolution) -> Vec<String> {
    let mut warnings = Vec::new();
    if sol.diagnostics.boundary_warning {
        let l = &cfg.cell.l_search;
        warnings.push(format!(
            "minimizing L = {} sits at an end of the search range [{}, {}]",
            sol.l_star.unwrap_or(f64::NAN),
            l.l_min,
            l.l_max
        ));
    }
    warnings
}

fn status_for(warnings: &[String]) -> Status {
    if warnings.is_empty() {
        Status::Ok
    } else {
        Status::Warning
    }
}

/// Membrane density at the configured `(x₀, F̄)`.
pub fn cmd_density(cfg: &RunConfig, _ctx: &Context) -> Result<Report, CliError> {
    let w = cfg.integrand.resolve()?;
    let spec = cfg.cell.spec(cfg.seed, cfg.cell.cells)?;
    let sol = membrane_density(&w, &spec)?;
    let bounds = w.growth().effective_bounds(spec.f_bar.norm(), 0.0);
    let warnings = cell_warnings(cfg, &sol);
    Ok(Report::new(
        "density",
        status_for(&warnings),
        warnings,
        cell_result(&sol, bounds),
        Provenance::new(cfg, Some(&w)),
    ))
}

/// Cosserat density at the configured `(x₀, F̄, z)`.
pub fn cmd_cosserat(cfg: &RunConfig, _ctx: &Context) -> Result<Report, CliError> {
    let w = cfg.integrand.resolve()?;
    let z = vec3(&cfg.cell.z);
    let spec = cfg.cell.spec(cfg.seed, cfg.cell.cells)?.with_z(z);
    let sol = cosserat_density(&w, &spec)?;
    let bounds = w.growth().effective_bounds(spec.f_bar.norm(), z.norm());
    let warnings = cell_warnings(cfg, &sol);
    Ok(Report::new(
        "cosserat",
        status_for(&warnings),
        warnings,
        cell_result(&sol, bounds),
        Provenance::new(cfg, Some(&w)),
    ))
}

/// Discrete quasiconvexification at `[qcx]`, with `W` and the laminate bound
/// for comparison.
pub fn cmd_qcx(cfg: &RunConfig, _ctx: &Context) -> Result<Report, CliError> {
    let w = cfg.integrand.resolve()?;
    let x = cfg.qcx.point();
    let f: Mat3 = rows3(&cfg.qcx.f);
    let sol = quasiconvexify(&w, &x, &f, &cfg.qcx.mesh()?, &inner(cfg))?;
    let lam = lamination_upper_bound(&w, &x, &f, None)?;
    let unrelaxed = w.evaluate(&x, &f)?;
    let mut warnings = Vec::new();
    let d = &sol.diagnostics;
    if !d.converged {
        warnings.push(format!("cell solve stopped with gradient norm {:e}", d.grad_norm));
    }
    let result = json!({
        "value": sol.value,
        "unrelaxed": unrelaxed,
        "stress": to_rows(&sol.dual),
        "lamination_bound": lam.value,
        "lamination": { "lambda": lam.lambda, "a": lam.a.as_slice(), "n": lam.n.as_slice(), "improved": lam.improved },
        "iterations": d.iterations,
        "grad_norm": d.grad_norm,
        "converged": d.converged,
        "starts": d.starts,
    });
    Ok(Report::new("qcx", status_for(&warnings), warnings, result, Provenance::new(cfg, Some(&w))))
}

/// Thin-film minimization at each thickness against the limit functional.
pub fn cmd_gamma(cfg: &RunConfig, ctx: &Context) -> Result<Report, CliError> {
    let w = cfg.integrand.resolve()?;
    let problem = cfg.gamma.problem(&w, inner(cfg));
    let table;
    let table_source;
    let cell_source;
    let source: &dyn DensitySource = match cfg.gamma.source {
        SourceKind::Cell => {
            cell_source = CellSource::new(&w, cfg.cell.spec(cfg.seed, cfg.gamma.source_cells)?)?;
            &cell_source
        }
        SourceKind::Table => {
            let path = ctx.resolve(&cfg.gamma.table);
            table = DensityTable::load(&path, Some(&w.hash()))?;
            table_source = TableSource::new(&table);
            &table_source
        }
    };
    let report = convergence_study(&problem, source)?;

    let mut warnings = Vec::new();
    if let Some(e) = &report.limit_failure {
        warnings.push(format!("limit functional: {e}"));
    }
    for r in &report.rows {
        if let Some(e) = &r.failure {
            warnings.push(format!("epsilon = {}: {e}", r.epsilon));
        }
    }
    let failed_all = report.limit_failure.is_some() && report.rows.iter().all(|r| r.failure.is_some());
    let status = if failed_all {
        Status::Error
    } else {
        status_for(&warnings)
    };
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "epsilon": r.epsilon,
                "energy": r.energy,
                "gap": r.gap,
                "iterations": r.iterations,
                "bbar_norm": r.bbar_norm,
                "failure": r.failure,
            })
        })
        .collect();
    let max_gap = report.rows.iter().map(|r| r.gap.abs()).fold(0.0, f64::max);
    let result = json!({
        "limit_energy": report.limit_energy,
        "limit_iterations": report.limit_iterations,
        "limit_failure": report.limit_failure,
        "rows": rows,
        "max_gap": max_gap,
        "gaps_monotone": report.gaps_monotone(1e-8),
    });
    let mut out = Report::new("gamma", status, warnings, result, Provenance::new(cfg, Some(&w)));
    out.runtime.timings = json!({
        "limit_seconds": report.limit_seconds,
        "row_seconds": report.rows.iter().map(|r| r.seconds).collect::<Vec<_>>(),
    });
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|source| CliError::Io {
        path: PathBuf::from("convergence.csv"),
        source,
    })?;
    out.csv.push(("convergence.csv".into(), String::from_utf8(csv).expect("utf-8 csv")));
    Ok(out)
}

/// Samples a density table into the output directory, resuming from a
/// checkpoint left by an interrupted run.
pub fn cmd_tabulate(cfg: &RunConfig, ctx: &Context) -> Result<Report, CliError> {
    let w = cfg.integrand.resolve()?;
    let t = &cfg.tabulate;
    let template = cfg.cell.spec(cfg.seed, t.cells)?;
    let path = ctx.resolve(&t.file);
    let mut checkpoint = path.clone().into_os_string();
    checkpoint.push(".checkpoint");
    let checkpoint = PathBuf::from(checkpoint);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let progress = |done: usize, total: usize| log::info!("table nodes: {done}/{total}");
    let table = DensityTable::build(
        &w,
        &t.grid,
        t.kind,
        &template,
        t.checkpoint.then_some(checkpoint.as_path()),
        Some(&progress),
    )?;
    table.save(&path)?;
    if t.checkpoint && checkpoint.exists() {
        let _ = std::fs::remove_file(&checkpoint);
    }

    let invalid = table.invalid_count();
    let mut warnings = Vec::new();
    if invalid > 0 {
        warnings.push(format!("{invalid} of {} nodes failed to solve", table.values().len()));
    }
    let defects = match t.kind {
        TableKind::Cosserat => table.z_convexity_defects(2.0 * cfg.cell.tol).len(),
        TableKind::Membrane => 0,
    };
    if defects > 0 {
        warnings.push(format!("{defects} z-convexity defects along the table's z axes"));
    }
    let result = json!({
        "file": t.file,
        "kind": t.kind,
        "nodes": table.values().len(),
        "invalid": invalid,
        "z_convexity_defects": defects,
        "sha256": hex::encode(Sha256::digest(table.to_bytes())),
        "min_value": table.values().iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min),
        "max_value": table.values().iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max),
    });
    let mut out = Report::new("tabulate", status_for(&warnings), warnings, result, Provenance::new(cfg, Some(&w)));
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    out.csv.push(("table.csv".into(), String::from_utf8(csv).expect("utf-8 csv")));
    Ok(out)
}

/// Runs the configured checks; fails when any check fails.
pub fn cmd_check(cfg: &RunConfig, _ctx: &Context) -> Result<Report, CliError> {
    let w: StoredEnergyDensity = cfg.integrand.resolve()?;
    let outcomes = run_checks(cfg, &w)?;
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{:?} failed: {}", o.name, o.note.as_deref().unwrap_or("")))
        .collect();
    let status = if failed.is_empty() { Status::Ok } else { Status::Error };
    let result = json!({
        "passed": failed.is_empty(),
        "checks": outcomes,
    });
    let mut out = Report::new("check", status, failed, result, Provenance::new(cfg, Some(&w)));
    let mut csv = String::from("check,passed,samples,violations,worst\n");
    for o in &outcomes {
        let name = serde_json::to_value(o.name).expect("name serializes");
        csv += &format!("{},{},{},{},{:e}\n", name.as_str().unwrap_or(""), o.passed, o.samples, o.violations, o.worst);
    }
    out.csv.push(("check.csv".into(), csv));
    Ok(out)
}
