//! Arc-length-parameterized C² reference trajectories.
//!
//! Waypoints are resampled at uniform chord-length stations and an
//! interpolating cubic spline is fitted per coordinate axis (natural end
//! conditions for open paths, periodic for closed loops). Station length is
//! treated as arc length; at the default 5 cm spacing the chord/arc error is
//! below 0.1% for the curvatures flown here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default resampling spacing, m.
pub const DEFAULT_SPACING: f64 = 0.05;

const NEWTON_MAX_ITERS: usize = 20;
const PROJECT_BACK_WINDOW: f64 = 0.2;
const PROJECT_FWD_WINDOW: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("path needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("consecutive waypoints coincide at index {0}")]
    CoincidentPoints(usize),
    #[error("spacing {0} must be positive and smaller than the total chord length")]
    BadSpacing(f64),
    #[error("spline invariant violated: {0}")]
    InvariantViolated(String),
    #[error("degenerate tangent: |r'| < 1e-9 at theta = {0}")]
    DegenerateTangent(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaypointPath {
    pub points: Vec<[f64; 3]>,
    pub closed: bool,
}

impl WaypointPath {
    pub fn new(points: Vec<[f64; 3]>, closed: bool) -> Self {
        Self { points, closed }
    }

    /// Cumulative chord stations; for closed paths includes the wrap segment.
    pub fn stations(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.points.len() + 1);
        s.push(0.0);
        for w in self.points.windows(2) {
            s.push(s.last().unwrap() + dist(w[0], w[1]));
        }
        if self.closed {
            let last = *self.points.last().unwrap();
            s.push(s.last().unwrap() + dist(last, self.points[0]));
        }
        s
    }

    pub fn total_chord_length(&self) -> f64 {
        *self.stations().last().unwrap()
    }

    /// Read a waypoint CSV with header `x,y,z` (meters).
    pub fn from_csv(text: &str, closed: bool) -> Result<Self, PathError> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('x')) {
                continue;
            }
            let cols: Vec<f64> = line.split(',').filter_map(|c| c.trim().parse().ok()).collect();
            if cols.len() != 3 {
                return Err(PathError::InvariantViolated(format!("bad CSV row {}: {line}", i + 1)));
            }
            points.push([cols[0], cols[1], cols[2]]);
        }
        Ok(Self { points, closed })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
        }
        out
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

/// Resample a polyline at uniform chord-length stations.
pub fn resample_uniform(path: &WaypointPath, spacing: f64) -> Result<WaypointPath, PathError> {
    if path.points.len() < 2 {
        return Err(PathError::TooFewPoints { needed: 2, got: path.points.len() });
    }
    for (i, w) in path.points.windows(2).enumerate() {
        if dist(w[0], w[1]) <= 1e-9 {
            return Err(PathError::CoincidentPoints(i));
        }
    }
    let stations = path.stations();
    let total = *stations.last().unwrap();
    if !(spacing > 0.0 && spacing < total) {
        return Err(PathError::BadSpacing(spacing));
    }

    // vertex list including the wrap vertex for closed paths
    let mut verts = path.points.clone();
    if path.closed {
        verts.push(path.points[0]);
    }

    let n = (total / spacing).round().max(1.0) as usize;
    let step = total / n as f64;
    let count = if path.closed { n } else { n + 1 };

    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for k in 0..count {
        let s = (k as f64 * step).min(total);
        while seg + 2 < stations.len() && stations[seg + 1] < s {
            seg += 1;
        }
        let seg_len = stations[seg + 1] - stations[seg];
        let t = if seg_len > 0.0 { (s - stations[seg]) / seg_len } else { 0.0 };
        out.push(lerp(verts[seg], verts[seg + 1], t));
    }
    if !path.closed {
        *out.last_mut().unwrap() = *path.points.last().unwrap();
    }
    Ok(WaypointPath { points: out, closed: path.closed })
}

/// Per-axis cubic spline over uniform knots in the progress parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArcLengthSpline {
    /// Knot values per axis; y[i] at theta = i*h. For closed splines the
    /// wrap value y[n] == y[0] is implicit.
    ys: [Vec<f64>; 3],
    /// Second derivatives at the knots (one per knot, plus wrap for closed).
    m2: [Vec<f64>; 3],
    h: f64,
    pub total_length: f64,
    pub closed: bool,
}

/// Fit an interpolating cubic spline through a uniformly resampled path.
pub fn fit_spline(path: &WaypointPath) -> Result<ArcLengthSpline, PathError> {
    if path.points.len() < 4 {
        return Err(PathError::TooFewPoints { needed: 4, got: path.points.len() });
    }
    let stations = path.stations();
    let total = *stations.last().unwrap();
    let n_int = if path.closed { path.points.len() } else { path.points.len() - 1 };
    let h = total / n_int as f64;

    let mut ys: [Vec<f64>; 3] = Default::default();
    let mut m2: [Vec<f64>; 3] = Default::default();
    for axis in 0..3 {
        let y: Vec<f64> = path.points.iter().map(|p| p[axis]).collect();
        let m = if path.closed { periodic_second_derivs(&y, h) } else { natural_second_derivs(&y, h) };
        ys[axis] = y;
        m2[axis] = m;
    }

    let spline = ArcLengthSpline { ys, m2, h, total_length: total, closed: path.closed };
    spline.check_invariants()?;
    Ok(spline)
}

/// Natural spline: solve tridiagonal system for knot second derivatives.
fn natural_second_derivs(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len() - 1; // intervals
    let mut m = vec![0.0; n + 1];
    if n < 2 {
        return m;
    }
    // interior equations: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i-1]-2y[i]+y[i+1]) / h^2
    let k = n - 1;
    let mut diag = vec![4.0; k];
    let mut rhs = vec![0.0; k];
    for i in 1..n {
        rhs[i - 1] = 6.0 * (y[i - 1] - 2.0 * y[i] + y[i + 1]) / (h * h);
    }
    // Thomas algorithm with unit off-diagonals
    for i in 1..k {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    m[n - 1] = rhs[k - 1] / diag[k - 1];
    for i in (1..n - 1).rev() {
        m[i] = (rhs[i - 1] - m[i + 1]) / diag[i - 1];
    }
    m
}

/// Periodic spline via Sherman–Morrison on the cyclic tridiagonal system.
fn periodic_second_derivs(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len(); // intervals == knots; y[n] wraps to y[0]
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let ym = y[(i + n - 1) % n];
        let yp = y[(i + 1) % n];
        rhs[i] = 6.0 * (ym - 2.0 * y[i] + yp) / (h * h);
    }
    // cyclic system: 4 on the diagonal, 1 on off-diagonals and corners
    let gamma = -4.0;
    let solve_tri = |b: &[f64], d0_adj: f64, dn_adj: f64| -> Vec<f64> {
        let k = b.len();
        let mut diag = vec![4.0; k];
        diag[0] += d0_adj;
        diag[k - 1] += dn_adj;
        let mut r = b.to_vec();
        for i in 1..k {
            let w = 1.0 / diag[i - 1];
            diag[i] -= w;
            r[i] -= w * r[i - 1];
        }
        let mut x = vec![0.0; k];
        x[k - 1] = r[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            x[i] = (r[i] - x[i + 1]) / diag[i];
        }
        x
    };
    // A = T + u v^T with u = (gamma, 0, .., 1)^T scaled; standard construction
    let d0_adj = -gamma;
    let dn_adj = -1.0 / gamma;
    let x = solve_tri(&rhs, d0_adj, dn_adj);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = 1.0;
    let z = solve_tri(&u, d0_adj, dn_adj);
    let vx = x[0] + x[n - 1] / gamma;
    let vz = z[0] + z[n - 1] / gamma;
    let factor = vx / (1.0 + vz);
    (0..n).map(|i| x[i] - factor * z[i]).collect()
}

impl ArcLengthSpline {
    fn n_intervals(&self) -> usize {
        if self.closed {
            self.ys[0].len()
        } else {
            self.ys[0].len() - 1
        }
    }

    fn knot(&self, axis: usize, i: usize) -> (f64, f64) {
        let n = self.ys[axis].len();
        let idx = if self.closed { i % self.ys[axis].len() } else { i.min(n - 1) };
        (self.ys[axis][idx], self.m2[axis][idx])
    }

    /// Map theta to (interval index, local offset, out-of-domain linear extension).
    fn locate(&self, theta: f64) -> (usize, f64, f64) {
        let n = self.n_intervals();
        if self.closed {
            let t = theta.rem_euclid(self.total_length);
            let i = ((t / self.h) as usize).min(n - 1);
            (i, t - i as f64 * self.h, 0.0)
        } else if theta < 0.0 {
            (0, 0.0, theta)
        } else if theta > self.total_length {
            (n - 1, self.h, theta - self.total_length)
        } else {
            let i = ((theta / self.h) as usize).min(n - 1);
            (i, theta - i as f64 * self.h, 0.0)
        }
    }

    fn eval_axis(&self, axis: usize, i: usize, dx: f64) -> (f64, f64, f64) {
        let h = self.h;
        let (y0, m0) = self.knot(axis, i);
        let (y1, m1) = self.knot(axis, i + 1);
        let a = h - dx;
        let val = m0 * a * a * a / (6.0 * h)
            + m1 * dx * dx * dx / (6.0 * h)
            + (y0 / h - m0 * h / 6.0) * a
            + (y1 / h - m1 * h / 6.0) * dx;
        let d1 = -m0 * a * a / (2.0 * h)
            + m1 * dx * dx / (2.0 * h)
            + (y1 - y0) / h
            - (m1 - m0) * h / 6.0;
        let d2 = m0 * a / h + m1 * dx / h;
        (val, d1, d2)
    }

    /// Position r(theta). Open paths extrapolate linearly beyond the ends.
    pub fn eval(&self, theta: f64) -> [f64; 3] {
        let (i, dx, ext) = self.locate(theta);
        let mut out = [0.0; 3];
        for axis in 0..3 {
            let (v, d1, _) = self.eval_axis(axis, i, dx);
            out[axis] = v + ext * d1;
        }
        out
    }

    /// First derivative r'(theta).
    pub fn deriv(&self, theta: f64) -> [f64; 3] {
        let (i, dx, _) = self.locate(theta);
        let mut out = [0.0; 3];
        for axis in 0..3 {
            out[axis] = self.eval_axis(axis, i, dx).1;
        }
        out
    }

    /// Second derivative r''(theta); zero in the extrapolated region.
    pub fn deriv2(&self, theta: f64) -> [f64; 3] {
        let (i, dx, ext) = self.locate(theta);
        let mut out = [0.0; 3];
        for axis in 0..3 {
            out[axis] = if ext != 0.0 { 0.0 } else { self.eval_axis(axis, i, dx).2 };
        }
        out
    }

    /// Unit tangent t(theta).
    pub fn tangent(&self, theta: f64) -> Result<[f64; 3], PathError> {
        let d = self.deriv(theta);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if n < 1e-9 {
            return Err(PathError::DegenerateTangent(theta));
        }
        Ok([d[0] / n, d[1] / n, d[2] / n])
    }

    /// Climb angle gamma(theta) = arcsin(t_z).
    pub fn climb(&self, theta: f64) -> Result<f64, PathError> {
        Ok(self.tangent(theta)?[2].clamp(-1.0, 1.0).asin())
    }

    /// Curvature kappa(theta) of the space curve.
    pub fn curvature(&self, theta: f64) -> f64 {
        let d1 = self.deriv(theta);
        let d2 = self.deriv2(theta);
        let cx = d1[1] * d2[2] - d1[2] * d2[1];
        let cy = d1[2] * d2[0] - d1[0] * d2[2];
        let cz = d1[0] * d2[1] - d1[1] * d2[0];
        let cross = (cx * cx + cy * cy + cz * cz).sqrt();
        let n1 = (d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]).sqrt();
        if n1 < 1e-9 {
            return f64::INFINITY;
        }
        cross / (n1 * n1 * n1)
    }

    /// Locate the progress parameter closest to `p`, seeded at `theta_prev`
    /// and restricted to the window [theta_prev - 0.2, theta_prev + 1.0] m.
    /// Falls back to a 1 cm grid search; never fails.
    pub fn project(&self, p: [f64; 3], theta_prev: f64) -> f64 {
        let lo = theta_prev - PROJECT_BACK_WINDOW;
        let hi = theta_prev + PROJECT_FWD_WINDOW;
        let (lo, hi) = if self.closed {
            (lo, hi)
        } else {
            (lo.max(0.0).min(self.total_length), hi.max(0.0).min(self.total_length))
        };

        let dist2 = |theta: f64| {
            let r = self.eval(theta);
            let e = [p[0] - r[0], p[1] - r[1], p[2] - r[2]];
            e[0] * e[0] + e[1] * e[1] + e[2] * e[2]
        };

        // Newton on g(theta) = -(p - r) . r'
        let mut theta = theta_prev.clamp(lo, hi);
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITERS {
            let r = self.eval(theta);
            let d1 = self.deriv(theta);
            let d2 = self.deriv2(theta);
            let e = [p[0] - r[0], p[1] - r[1], p[2] - r[2]];
            let g = -(e[0] * d1[0] + e[1] * d1[1] + e[2] * d1[2]);
            let gp = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]
                - (e[0] * d2[0] + e[1] * d2[1] + e[2] * d2[2]);
            if gp.abs() < 1e-12 {
                break;
            }
            let step = -g / gp;
            theta = (theta + step).clamp(lo, hi);
            if step.abs() < 1e-10 {
                converged = gp > 0.0 || g.abs() < 1e-9;
                break;
            }
        }
        if converged && dist2(theta) <= dist2(theta_prev.clamp(lo, hi)) + 1e-12 {
            return theta;
        }

        // grid fallback at 1 cm, then polish
        let steps = ((hi - lo) / 0.01).ceil().max(1.0) as usize;
        let mut best = lo;
        let mut best_d = dist2(lo);
        for k in 1..=steps {
            let t = lo + (hi - lo) * k as f64 / steps as f64;
            let d = dist2(t);
            if d < best_d {
                best_d = d;
                best = t;
            }
        }
        let mut theta = best;
        for _ in 0..5 {
            let r = self.eval(theta);
            let d1 = self.deriv(theta);
            let d2 = self.deriv2(theta);
            let e = [p[0] - r[0], p[1] - r[1], p[2] - r[2]];
            let g = -(e[0] * d1[0] + e[1] * d1[1] + e[2] * d1[2]);
            let gp = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]
                - (e[0] * d2[0] + e[1] * d2[1] + e[2] * d2[2]);
            if gp <= 1e-12 {
                break;
            }
            let cand = (theta - g / gp).clamp(lo, hi);
            if dist2(cand) <= dist2(theta) {
                theta = cand;
            } else {
                break;
            }
        }
        theta
    }

    pub fn check_invariants(&self) -> Result<(), PathError> {
        // C2 at interior knots: one-sided second derivatives agree
        let n = self.n_intervals();
        for i in 1..n {
            for axis in 0..3 {
                let left = self.eval_axis(axis, i - 1, self.h).2;
                let right = self.eval_axis(axis, i, 0.0).2;
                if (left - right).abs() >= 1e-8 {
                    return Err(PathError::InvariantViolated(format!(
                        "C2 mismatch {} at knot {i} axis {axis}",
                        left - right
                    )));
                }
            }
        }
        if self.closed {
            for axis in 0..3 {
                let (a, b) = (self.eval(0.0)[axis], self.eval(self.total_length)[axis]);
                let (da, db) = (self.deriv(0.0)[axis], self.deriv(self.total_length)[axis]);
                let (dda, ddb) = (self.deriv2(0.0)[axis], self.deriv2(self.total_length)[axis]);
                if (a - b).abs() >= 1e-8 || (da - db).abs() >= 1e-8 || (dda - ddb).abs() >= 1e-8 {
                    return Err(PathError::InvariantViolated(format!(
                        "periodic wrap mismatch on axis {axis}"
                    )));
                }
            }
        }
        // near-arc-length parameterization at 1 cm sampling
        let samples = (self.total_length / 0.01).ceil() as usize;
        for k in 0..=samples {
            let theta = self.total_length * k as f64 / samples as f64;
            let d = self.deriv(theta);
            let speed = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !(0.9..=1.1).contains(&speed) {
                return Err(PathError::InvariantViolated(format!(
                    "|r'| = {speed:.4} outside [0.9, 1.1] at theta = {theta:.3}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spline serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PathError> {
        serde_json::from_str(s).map_err(|e| PathError::InvariantViolated(e.to_string()))
    }
}

/// Convenience: resample at the default spacing and fit.
pub fn build_reference(path: &WaypointPath, spacing: f64) -> Result<ArcLengthSpline, PathError> {
    let resampled = resample_uniform(path, spacing)?;
    fit_spline(&resampled)
}
