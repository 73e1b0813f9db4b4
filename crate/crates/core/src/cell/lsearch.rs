//! Search over the transverse scale `L`: a log-uniform grid followed by
//! golden-section refinement in `ln L` around the grid minimum.

use serde::{Deserialize, Serialize};

use super::CellError;
use crate::descent::golden_section;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct LSearchConfig {
    pub l_min: f64,
    pub l_max: f64,
    pub grid_count: usize,
    /// Width in `ln L` at which golden-section refinement stops.
    pub golden_tol: f64,
}

impl Default for LSearchConfig {
    fn default() -> Self {
        Self {
            l_min: 1e-2,
            l_max: 1e2,
            grid_count: 17,
            golden_tol: 1e-2,
        }
    }
}

impl LSearchConfig {
    pub fn validate(&self) -> Result<(), CellError> {
        if !(self.l_min > 0.0 && self.l_min < self.l_max && self.l_max.is_finite()) {
            return Err(CellError::InvalidSpec(format!(
                "L range must satisfy 0 < l_min < l_max, got [{}, {}]",
                self.l_min, self.l_max
            )));
        }
        if self.grid_count < 3 {
            return Err(CellError::InvalidSpec("L grid needs at least 3 points".into()));
        }
        if !(self.golden_tol > 0.0) {
            return Err(CellError::InvalidSpec("golden tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let (a, b) = (self.l_min.ln(), self.l_max.ln());
        let n = self.grid_count - 1;
        (0..=n)
            .map(|i| match i {
                0 => self.l_min,
                _ if i == n => self.l_max,
                _ => (a + (b - a) * i as f64 / n as f64).exp(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LProfilePoint {
    pub l: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One inner minimization at fixed `L`.
#[derive(Debug, Clone)]
pub(crate) struct InnerResult {
    pub value: f64,
    pub x: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

pub(crate) struct SearchOutcome {
    pub l: f64,
    pub best: InnerResult,
    pub profile: Vec<LProfilePoint>,
    pub flat: bool,
    pub boundary_warning: bool,
}

struct Evaluated {
    l: f64,
    result: InnerResult,
}

fn nearest<'a>(done: &'a [Evaluated], l: f64) -> Option<&'a [f64]> {
    done.iter()
        .min_by(|a, b| (a.l / l).ln().abs().total_cmp(&(b.l / l).ln().abs()))
        .map(|e| e.result.x.as_slice())
}

/// Runs the grid and refinement. `solve(L, start)` performs one inner
/// minimization; `start` is the solution at the nearest evaluated `L`.
/// `seed` is an extra evaluation performed first (e.g. a coarse-mesh solution
/// injected into a refined mesh).
pub(crate) fn search<F>(
    cfg: &LSearchConfig,
    tol: f64,
    seed: Option<(f64, Vec<f64>)>,
    mut solve: F,
) -> Result<SearchOutcome, CellError>
where
    F: FnMut(f64, Option<&[f64]>) -> Result<InnerResult, CellError>,
{
    cfg.validate()?;
    let mut done: Vec<Evaluated> = Vec::new();
    if let Some((l, x)) = seed {
        let result = solve(l, Some(&x))?;
        done.push(Evaluated { l, result });
    }
    let grid = cfg.grid();
    let mut grid_values = Vec::with_capacity(grid.len());
    for &l in &grid {
        let result = {
            let start = nearest(&done, l).map(|s| s.to_vec());
            solve(l, start.as_deref())?
        };
        grid_values.push(result.value);
        done.push(Evaluated { l, result });
    }

    let (imin, vmin) = grid_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    let vmax = grid_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let flat = vmax - vmin <= 0.5 * tol * (1.0 + vmin.abs());

    if !flat {
        let lo = grid[imin.saturating_sub(1)].ln();
        let hi = grid[(imin + 1).min(grid.len() - 1)].ln();
        golden_section(
            |t| {
                let l = t.exp();
                let start = nearest(&done, l).map(|s| s.to_vec());
                let result = solve(l, start.as_deref())?;
                let v = result.value;
                done.push(Evaluated { l, result });
                Ok::<_, CellError>(v)
            },
            lo,
            hi,
            cfg.golden_tol,
        )?;
    }

    let mut best = 0;
    for (i, e) in done.iter().enumerate() {
        if e.result.value < done[best].result.value {
            best = i;
        }
    }
    let mut profile: Vec<LProfilePoint> = done
        .iter()
        .map(|e| LProfilePoint {
            l: e.l,
            value: e.result.value,
            iterations: e.result.iterations,
            converged: e.result.converged,
        })
        .collect();
    profile.sort_by(|a, b| a.l.total_cmp(&b.l));
    let boundary_warning = !flat && (imin == 0 || imin == grid.len() - 1);
    let chosen = done.swap_remove(best);
    Ok(SearchOutcome {
        l: chosen.l,
        best: chosen.result,
        profile,
        flat,
        boundary_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(value: impl Fn(f64) -> f64) -> impl FnMut(f64, Option<&[f64]>) -> Result<InnerResult, CellError> {
        move |l, _| {
            Ok(InnerResult {
                value: value(l),
                x: vec![],
                iterations: 0,
                grad_norm: 0.0,
                converged: true,
            })
        }
    }

    #[test]
    fn grid_endpoints_exact() {
        let g = LSearchConfig::default().grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[16], 1e2);
        assert!((g[8] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refines_interior_minimum() {
        let cfg = LSearchConfig::default();
        let out = search(&cfg, 1e-6, None, fake(|l: f64| (l.ln() - 0.3f64.ln()).powi(2))).unwrap();
        assert!((out.l.ln() - 0.3f64.ln()).abs() < 1e-2);
        assert!(!out.boundary_warning && !out.flat);
    }

    #[test]
    fn flags_boundary_minimum() {
        let cfg = LSearchConfig::default();
        let out = search(&cfg, 1e-6, None, fake(|l| 1.0 / l)).unwrap();
        assert!(out.boundary_warning);
        assert_eq!(out.l, 1e2);
    }

    #[test]
    fn flat_profile_skips_refinement() {
        let cfg = LSearchConfig::default();
        let out = search(&cfg, 1e-6, None, fake(|_| 2.0)).unwrap();
        assert!(out.flat && !out.boundary_warning);
        assert_eq!(out.profile.len(), 17);
        assert_eq!(out.l, 1e-2);
    }
}
