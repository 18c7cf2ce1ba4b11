//! Box-constrained limited-memory quasi-Newton minimizer.
//!
//! Projected L-BFGS with Armijo backtracking along the projection arc.
//! Deterministic and warm-start friendly; used by the contouring controller,
//! the gate planner refinement stage, and the identification fits.

use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub memory: usize,
    /// Optional wall-clock budget in milliseconds. Left unset in closed-loop
    /// runs so that solutions stay bit-reproducible across re-runs.
    pub budget_ms: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iters: 40, grad_tol: 1e-3, memory: 8, budget_ms: None }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pg_inf_norm: f64,
    pub evals: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected-gradient infinity norm, the stationarity measure for the box.
fn pg_norm(x: &[f64], g: &[f64], bounds: &BoxBounds) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..x.len() {
        let step = (x[i] - g[i]).clamp(bounds.lo[i], bounds.hi[i]) - x[i];
        norm = norm.max(step.abs());
    }
    norm
}

/// Backtracking Armijo search along the projection arc of direction `d`.
/// Accepts on sufficient decrease, or on plain decrease once the predicted
/// reduction falls below the rounding floor of `fx`.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    bounds: &BoxBounds,
    x_new: &mut [f64],
    g_new: &mut [f64],
    f_new: &mut f64,
    evals: &mut usize,
) -> bool
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut step = 1.0;
    for _ in 0..40 {
        for j in 0..n {
            x_new[j] = (x[j] + step * d[j]).clamp(bounds.lo[j], bounds.hi[j]);
        }
        let dx_dot_g: f64 = (0..n).map(|j| g[j] * (x_new[j] - x[j])).sum();
        if dx_dot_g >= 0.0 {
            // projection annihilated the step
            step *= 0.5;
            if step < 1e-16 {
                return false;
            }
            continue;
        }
        let fv = f(x_new, g_new);
        *evals += 1;
        let sufficient = fv <= fx + 1e-4 * dx_dot_g;
        let at_rounding_floor = dx_dot_g.abs() < 1e-12 * fx.abs().max(1.0) && fv < fx;
        if fv.is_finite() && (sufficient || at_rounding_floor) {
            *f_new = fv;
            return true;
        }
        step *= 0.5;
        if step < 1e-16 {
            return false;
        }
    }
    false
}

pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &BoxBounds, opts: &SolveOptions) -> Outcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let start = Instant::now();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evals = 1;

    let mut best_x = x.clone();
    let mut best_f = fx;

    // L-BFGS memory
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();

    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter;
        let pg = pg_norm(&x, &g, bounds);
        if pg < opts.grad_tol {
            converged = true;
            break;
        }
        if let Some(budget) = opts.budget_ms {
            if start.elapsed().as_secs_f64() * 1e3 > budget {
                break;
            }
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho[i] * dot(&s_hist[i], &d);
            for j in 0..n {
                d[j] -= alpha[i] * y_hist[i][j];
            }
        }
        if m > 0 {
            let last = m - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for i in 0..m {
            let beta = rho[i] * dot(&y_hist[i], &d);
            for j in 0..n {
                d[j] += (alpha[i] - beta) * s_hist[i][j];
            }
        }
        if dot(&g, &d) >= 0.0 {
            // not a descent direction; fall back to steepest descent
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            for j in 0..n {
                d[j] = -g[j];
            }
        }

        // Armijo backtracking along the projection arc. A quasi-Newton
        // direction from an ill-conditioned memory can be too small to move
        // the objective in floating point; when its line search fails, drop
        // the memory and retry once along steepest descent before giving up.
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut f_new = fx;
        let mut accepted = line_search(
            &mut f, &x, fx, &g, &d, bounds, &mut x_new, &mut g_new, &mut f_new, &mut evals,
        );
        if !accepted && !s_hist.is_empty() {
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            for j in 0..n {
                d[j] = -g[j];
            }
            accepted = line_search(
                &mut f, &x, fx, &g, &d, bounds, &mut x_new, &mut g_new, &mut f_new, &mut evals,
            );
        }
        if !accepted {
            break;
        }

        let s: Vec<f64> = (0..n).map(|j| x_new[j] - x[j]).collect();
        let yv: Vec<f64> = (0..n).map(|j| g_new[j] - g[j]).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            s_hist.push(s);
            y_hist.push(yv);
            rho.push(1.0 / sy);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
        } else {
            // negative curvature: stale pairs would keep producing the same
            // bad direction, so restart the metric
            s_hist.clear();
            y_hist.clear();
            rho.clear();
        }
        x = x_new.clone();
        g = g_new.clone();
        fx = f_new;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
        iterations = iter + 1;
    }

    let final_pg = if converged { pg_norm(&x, &g, bounds) } else { pg_norm(&best_x, &g, bounds) };
    Outcome {
        x: best_x,
        value: best_f,
        iterations,
        converged,
        pg_inf_norm: final_pg,
        evals,
    }
}

/// Central finite-difference gradient wrapper for objectives without an
/// analytic gradient (gate planner, identification fits).
pub fn minimize_fd<F>(mut f: F, x0: &[f64], bounds: &BoxBounds, opts: &SolveOptions, h: f64) -> Outcome
where
    F: FnMut(&[f64]) -> f64,
{
    let objective = |x: &[f64], g: &mut [f64]| {
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        f(x)
    };
    minimize(objective, x0, bounds, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quad_bounds(n: usize) -> BoxBounds {
        BoxBounds::new(vec![-10.0; n], vec![10.0; n])
    }

    #[test]
    fn minimizes_quadratic() {
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                let c = (i + 1) as f64;
                v += c * (x[i] - 1.0) * (x[i] - 1.0);
                g[i] = 2.0 * c * (x[i] - 1.0);
            }
            v
        };
        let out = minimize(f, &[5.0, -3.0, 0.0], &quad_bounds(3), &SolveOptions::default());
        assert!(out.converged);
        for xi in &out.x {
            assert_abs_diff_eq!(*xi, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn respects_box_constraints() {
        // unconstrained optimum at x = -2, box at [0, 5]
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] + 2.0);
            (x[0] + 2.0) * (x[0] + 2.0)
        };
        let bounds = BoxBounds::new(vec![0.0], vec![5.0]);
        let out = minimize(f, &[3.0], &bounds, &SolveOptions::default());
        assert!(out.converged);
        assert_abs_diff_eq!(out.x[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn converges_fast_from_optimum() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0];
            g[1] = 2.0 * x[1];
            x[0] * x[0] + x[1] * x[1]
        };
        let out = minimize(f, &[0.0, 0.0], &quad_bounds(2), &SolveOptions::default());
        assert!(out.converged);
        assert!(out.iterations <= 2);
    }

    #[test]
    fn rosenbrock_descends_monotonically() {
        let rosen = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a);
            g[1] = 200.0 * (b - a * a);
            100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2)
        };
        let x0 = [-1.2, 1.0];
        let mut g = vec![0.0; 2];
        let f0 = {
            let r = rosen;
            r(&x0, &mut g)
        };
        let out = minimize(
            rosen,
            &x0,
            &quad_bounds(2),
            &SolveOptions { max_iters: 200, grad_tol: 1e-6, ..Default::default() },
        );
        assert!(out.value <= f0);
        assert!(out.value < 1e-6, "value {}", out.value);
    }

    #[test]
    fn fd_gradient_variant_matches() {
        let out = minimize_fd(
            |x| (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2),
            &[0.0, 0.0],
            &quad_bounds(2),
            &SolveOptions::default(),
            1e-6,
        );
        assert_abs_diff_eq!(out.x[0], 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(out.x[1], -1.0, epsilon = 1e-4);
    }
}
