//! Limited-memory quasi-Newton descent with backtracking line search.
//!
//! Every inner minimization in the crate (fiber infima, cell problems, thin-film
//! and limit functionals) goes through [`lbfgs`]. The objective is a closure
//! that writes the gradient into a buffer and returns the value; it may fail,
//! in which case the error is propagated unchanged.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentSettings {
    pub max_iter: usize,
    /// Stop when `|g| <= grad_tol * (1 + |f|)`.
    pub grad_tol: f64,
    /// Number of stored curvature pairs.
    pub memory: usize,
}

impl Default for DescentSettings {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            grad_tol: 1e-8,
            memory: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DescentStatus {
    /// Gradient criterion met.
    Converged,
    /// No further decrease representable in floating point.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct DescentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: DescentStatus,
}

impl DescentResult {
    pub fn is_acceptable(&self) -> bool {
        self.status != DescentStatus::MaxIterations
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(grad: &[f64], pairs: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alpha = vec![0.0; pairs.len()];
    for (k, p) in pairs.iter().enumerate().rev() {
        let a = p.rho * dot(&p.s, &q);
        alpha[k] = a;
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
    }
    if let Some(last) = pairs.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (k, p) in pairs.iter().enumerate() {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (alpha[k] - b) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

/// Minimizes `f` from `x0`.
///
/// `f(x, g)` must return the objective value and overwrite `g` with the
/// gradient at `x`.
pub fn lbfgs<E, F>(mut f: F, x0: Vec<f64>, settings: &DescentSettings) -> Result<DescentResult, E>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64, E>,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)?;
    let mut evaluations = 1;
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(settings.memory);

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    let mut status = DescentStatus::MaxIterations;
    let mut flat_steps = 0;

    if n == 0 {
        return Ok(DescentResult {
            x,
            value: fx,
            grad: g,
            grad_norm: 0.0,
            iterations: 0,
            evaluations,
            status: DescentStatus::Converged,
        });
    }

    while iterations < settings.max_iter {
        let gnorm = norm(&g);
        if !fx.is_finite() || gnorm <= settings.grad_tol * (1.0 + fx.abs()) {
            status = DescentStatus::Converged;
            break;
        }
        let mut d = two_loop(&g, &pairs);
        let mut slope = dot(&d, &g);
        if pairs.is_empty() || slope >= 0.0 {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if pairs.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = false;
        let mut f_new = fx;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            f_new = f(&x_new, &mut g_new)?;
            evaluations += 1;
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            // safeguarded quadratic interpolation of the backtracking step
            let denom = 2.0 * (f_new - fx - step * slope);
            let trial = if f_new.is_finite() && denom > 0.0 {
                -slope * step * step / denom
            } else {
                0.5 * step
            };
            step = trial.clamp(0.1 * step, 0.5 * step);
        }
        iterations += 1;

        if !accepted {
            if pairs.is_empty() {
                status = DescentStatus::Stalled;
                break;
            }
            // retry from steepest descent with a fresh memory
            pairs.clear();
            continue;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if pairs.len() == settings.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        }

        let decrease = fx - f_new;
        let f_prev = fx;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;

        if decrease <= 4.0 * f64::EPSILON * fx.abs().max(f_prev.abs()) {
            flat_steps += 1;
            if flat_steps >= 8 {
                status = DescentStatus::Stalled;
                break;
            }
        } else {
            flat_steps = 0;
        }
    }

    let grad_norm = norm(&g);
    if status == DescentStatus::MaxIterations && grad_norm <= settings.grad_tol * (1.0 + fx.abs())
    {
        status = DescentStatus::Converged;
    }
    Ok(DescentResult {
        x,
        value: fx,
        grad: g,
        grad_norm,
        iterations,
        evaluations,
        status,
    })
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
///
/// Returns `(argmin, min)` over all points evaluated, so a non-unimodal
/// function still yields the best sample seen.
pub fn golden_section<E, F>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64), E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> Result<f64, Infallible> {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
    }

    #[test]
    fn solves_rosenbrock() {
        let r = lbfgs(rosenbrock, vec![-1.2, 1.0], &DescentSettings::default()).unwrap();
        assert_eq!(r.status, DescentStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales: Vec<f64> = (0..50).map(|i| 10f64.powf(i as f64 / 17.0)).collect();
        let f = |x: &[f64], g: &mut [f64]| -> Result<f64, Infallible> {
            let mut v = 0.0;
            for i in 0..x.len() {
                g[i] = scales[i] * (x[i] - 1.0);
                v += 0.5 * scales[i] * (x[i] - 1.0).powi(2);
            }
            Ok(v)
        };
        let settings = DescentSettings {
            grad_tol: 1e-10,
            ..Default::default()
        };
        let r = lbfgs(f, vec![0.0; 50], &settings).unwrap();
        assert_eq!(r.status, DescentStatus::Converged);
        assert!(r.value < 1e-18);
    }

    #[test]
    fn already_optimal_start_returns_immediately() {
        let f = |x: &[f64], g: &mut [f64]| -> Result<f64, Infallible> {
            g[0] = 2.0 * x[0];
            Ok(x[0] * x[0])
        };
        let r = lbfgs(f, vec![0.0], &DescentSettings::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.status, DescentStatus::Converged);
    }

    #[test]
    fn errors_propagate() {
        let f = |_: &[f64], _: &mut [f64]| -> Result<f64, &'static str> { Err("boom") };
        assert_eq!(
            lbfgs(f, vec![1.0], &DescentSettings::default()).unwrap_err(),
            "boom"
        );
    }

    #[test]
    fn golden_finds_parabola_vertex() {
        let (x, v) =
            golden_section(|t| Ok::<_, Infallible>((t - 0.3).powi(2) + 1.0), -1.0, 2.0, 1e-8)
                .unwrap();
        assert!((x - 0.3).abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
