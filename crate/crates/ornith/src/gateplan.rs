//! Offline racing-trajectory generation through gate sequences.
//!
//! Each gate-to-gate segment is a quintic Bézier with pinned endpoints; the
//! 12n interior control-point coordinates are optimized for the curvature
//! integral plus penalties (junction continuity, gate alignment, turning
//! radius, climb angle, flight volume). Differential evolution explores the
//! multimodal landscape globally, then a bound-constrained quasi-Newton
//! stage refines the best candidate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refpath::WaypointPath;
use crate::solver::{self, BoxBounds, SolveOptions};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("need at least 2 gates, got {0}")]
    TooFewGates(usize),
    #[error("gate {index} normal has norm {norm}, expected 1 within 1e-9")]
    BadNormal { index: usize, norm: f64 },
    #[error("constraint audit failed: {0}")]
    AuditFailed(String),
    #[error("gate file error: {0}")]
    GateFile(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Gate {
    pub position: [f64; 3],
    pub normal: [f64; 3],
}

impl Gate {
    pub fn validate(&self, index: usize) -> Result<(), PlanError> {
        let n = self.normal;
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(PlanError::BadNormal { index, norm });
        }
        Ok(())
    }
}

/// Parse a JSON array of `{position: [x,y,z], normal: [nx,ny,nz]}`.
pub fn gates_from_json(text: &str) -> Result<Vec<Gate>, PlanError> {
    let gates: Vec<Gate> = serde_json::from_str(text).map_err(|e| PlanError::GateFile(e.to_string()))?;
    for (i, g) in gates.iter().enumerate() {
        g.validate(i)?;
    }
    if gates.len() < 2 {
        return Err(PlanError::TooFewGates(gates.len()));
    }
    Ok(gates)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuinticBezier {
    pub points: [[f64; 3]; 6],
}

impl QuinticBezier {
    pub fn eval(&self, t: f64) -> [f64; 3] {
        let s = 1.0 - t;
        // Bernstein weights for degree 5
        let w = [
            s * s * s * s * s,
            5.0 * s * s * s * s * t,
            10.0 * s * s * s * t * t,
            10.0 * s * s * t * t * t,
            5.0 * s * t * t * t * t,
            t * t * t * t * t,
        ];
        let mut out = [0.0; 3];
        for (wi, p) in w.iter().zip(self.points.iter()) {
            for a in 0..3 {
                out[a] += wi * p[a];
            }
        }
        out
    }

    /// First derivative via the degree-reduction formula.
    pub fn d1(&self, t: f64) -> [f64; 3] {
        let s = 1.0 - t;
        let w = [s * s * s * s, 4.0 * s * s * s * t, 6.0 * s * s * t * t, 4.0 * s * t * t * t, t * t * t * t];
        let mut out = [0.0; 3];
        for i in 0..5 {
            for a in 0..3 {
                out[a] += 5.0 * w[i] * (self.points[i + 1][a] - self.points[i][a]);
            }
        }
        out
    }

    pub fn d2(&self, t: f64) -> [f64; 3] {
        let s = 1.0 - t;
        let w = [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t];
        let mut out = [0.0; 3];
        for i in 0..4 {
            for a in 0..3 {
                let dd = self.points[i + 2][a] - 2.0 * self.points[i + 1][a] + self.points[i][a];
                out[a] += 20.0 * w[i] * dd;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Volume {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Volume {
    fn clamp_point(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
            p[2].clamp(self.min[2], self.max[2]),
        ]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub lambda: f64,
    pub min_radius: f64,
    /// Maximum climb angle, degrees.
    pub max_climb_deg: f64,
    pub volume: Volume,
    /// DE population = pop_mult * 12n.
    pub pop_mult: usize,
    pub f_range: (f64, f64),
    pub crossover: f64,
    pub generations: usize,
    pub refine_iters: usize,
    /// Simpson quadrature samples per segment (even).
    pub quad_samples: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            min_radius: 1.8,
            max_climb_deg: 20.0,
            volume: Volume { min: [-5.0, -5.0, 0.1], max: [5.0, 5.0, 2.5] },
            pop_mult: 15,
            f_range: (0.5, 1.5),
            crossover: 0.8,
            generations: 60,
            refine_iters: 800,
            quad_samples: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PenaltyBreakdown {
    pub curvature_integral: f64,
    pub junction_c1: f64,
    pub junction_c2: f64,
    pub alignment: f64,
    pub radius: f64,
    pub climb: f64,
    pub bounds: f64,
    pub degenerate: bool,
}

impl PenaltyBreakdown {
    pub fn penalty_sum(&self) -> f64 {
        self.junction_c1 + self.junction_c2 + self.alignment + self.radius + self.climb + self.bounds
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RacePlan {
    pub gates: Vec<Gate>,
    pub segments: Vec<QuinticBezier>,
    pub cost: f64,
    pub penalties: PenaltyBreakdown,
}

/// Assemble Bézier segments from the decision vector; endpoints are pinned to
/// the gate positions and are never decision variables.
pub fn assemble_segments(z: &[f64], gates: &[Gate]) -> Vec<QuinticBezier> {
    let n = gates.len();
    debug_assert_eq!(z.len(), 12 * n);
    (0..n)
        .map(|i| {
            let g0 = gates[i].position;
            let g1 = gates[(i + 1) % n].position;
            let base = 12 * i;
            let mut points = [[0.0; 3]; 6];
            points[0] = g0;
            points[5] = g1;
            for j in 0..4 {
                for a in 0..3 {
                    points[j + 1][a] = z[base + 3 * j + a];
                }
            }
            QuinticBezier { points }
        })
        .collect()
}

/// Heuristic initial guess: interior points placed along the gate normals
/// with a 30% bias toward the opposite gate; z-coordinates overwritten by
/// linear interpolation between gate heights.
pub fn init_guess(gates: &[Gate], cfg: &PlanConfig) -> Vec<f64> {
    let n = gates.len();
    let mut z = vec![0.0; 12 * n];
    for i in 0..n {
        let gi = gates[i];
        let gj = gates[(i + 1) % n];
        let diff = [
            gj.position[0] - gi.position[0],
            gj.position[1] - gi.position[1],
            gj.position[2] - gi.position[2],
        ];
        let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
        let d = (0.3 * dist).max(1.0);
        let mut pts = [[0.0; 3]; 4];
        for a in 0..3 {
            pts[0][a] = gi.position[a] + d * gi.normal[a];
            pts[1][a] = gi.position[a] + 1.8 * d * gi.normal[a] + 0.3 * diff[a];
            pts[2][a] = gj.position[a] - 1.8 * d * gj.normal[a] - 0.3 * diff[a];
            pts[3][a] = gj.position[a] - d * gj.normal[a];
        }
        for (k, alpha) in [0.2, 0.4, 0.6, 0.8].iter().enumerate() {
            pts[k][2] = (1.0 - alpha) * gi.position[2] + alpha * gj.position[2];
        }
        for (k, p) in pts.iter().enumerate() {
            let clamped = cfg.volume.clamp_point(*p);
            for a in 0..3 {
                z[12 * i + 3 * k + a] = clamped[a];
            }
        }
    }
    z
}

/// Curvature-integral cost with penalty breakdown (composite Simpson
/// quadrature along each segment).
pub fn plan_cost(z: &[f64], gates: &[Gate], cfg: &PlanConfig) -> (f64, PenaltyBreakdown) {
    let segments = assemble_segments(z, gates);
    let n = segments.len();
    let m = cfg.quad_samples; // intervals, even
    let kappa_max = 1.0 / cfg.min_radius;
    let tz_max = (cfg.max_climb_deg.to_radians()).tan();

    let mut bd = PenaltyBreakdown::default();
    for seg in &segments {
        let mut integral = 0.0;
        let mut radius_pen = 0.0;
        let mut climb_pen = 0.0;
        let mut bounds_pen = 0.0;
        for k in 0..=m {
            let t = k as f64 / m as f64;
            let w = if k == 0 || k == m {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let d1 = seg.d1(t);
            let d2 = seg.d2(t);
            let speed2 = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2];
            let speed = speed2.sqrt();
            if speed < 1e-9 {
                bd.degenerate = true;
                integral += w * 1e6;
                continue;
            }
            let cx = d1[1] * d2[2] - d1[2] * d2[1];
            let cy = d1[2] * d2[0] - d1[0] * d2[2];
            let cz = d1[0] * d2[1] - d1[1] * d2[0];
            let cross2 = cx * cx + cy * cy + cz * cz;
            // kappa^2 * |C'| = |C' x C''|^2 / |C'|^5
            integral += w * cross2 / (speed2 * speed2 * speed);
            let kappa = cross2.sqrt() / (speed2 * speed);
            let rad_viol = (kappa - kappa_max).max(0.0);
            radius_pen += w * rad_viol * rad_viol * speed;
            let tz = (d1[2] / speed).abs();
            let climb_viol = (tz - tz_max).max(0.0);
            climb_pen += w * climb_viol * climb_viol * speed;
            let p = seg.eval(t);
            let mut bviol = 0.0;
            for a in 0..3 {
                bviol += (p[a] - cfg.volume.max[a]).max(0.0).powi(2)
                    + (cfg.volume.min[a] - p[a]).max(0.0).powi(2);
            }
            bounds_pen += w * bviol * speed;
        }
        let h = 1.0 / m as f64;
        bd.curvature_integral += integral * h / 3.0;
        bd.radius += radius_pen * h / 3.0;
        bd.climb += climb_pen * h / 3.0;
        bd.bounds += bounds_pen * h / 3.0;
    }

    for i in 0..n {
        let next = &segments[(i + 1) % n];
        let seg = &segments[i];
        let d1_end = seg.d1(1.0);
        let d1_start = next.d1(0.0);
        let d2_end = seg.d2(1.0);
        let d2_start = next.d2(0.0);
        for a in 0..3 {
            bd.junction_c1 += (d1_end[a] - d1_start[a]).powi(2);
            bd.junction_c2 += (d2_end[a] - d2_start[a]).powi(2);
        }
        let d0 = seg.d1(0.0);
        let speed = (d0[0] * d0[0] + d0[1] * d0[1] + d0[2] * d0[2]).sqrt();
        if speed < 1e-9 {
            bd.degenerate = true;
            bd.alignment += 1e6;
        } else {
            let ndot = (gates[i].normal[0] * d0[0] + gates[i].normal[1] * d0[1] + gates[i].normal[2] * d0[2]) / speed;
            bd.alignment += (1.0 - ndot).powi(2);
        }
    }

    let total = bd.curvature_integral + cfg.lambda * bd.penalty_sum();
    (total, bd)
}

fn de_bounds(gates: &[Gate], cfg: &PlanConfig) -> BoxBounds {
    let n = gates.len();
    let mut lo = Vec::with_capacity(12 * n);
    let mut hi = Vec::with_capacity(12 * n);
    for _ in 0..4 * n {
        for a in 0..3 {
            lo.push(cfg.volume.min[a]);
            hi.push(cfg.volume.max[a]);
        }
    }
    BoxBounds::new(lo, hi)
}

fn eval_population(trials: &[Vec<f64>], gates: &[Gate], cfg: &PlanConfig) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        trials.par_iter().map(|z| plan_cost(z, gates, cfg).0).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        eval_population_seq(trials, gates, cfg)
    }
}

/// Sequential population evaluation; also the benchmark baseline.
pub fn eval_population_seq(trials: &[Vec<f64>], gates: &[Gate], cfg: &PlanConfig) -> Vec<f64> {
    trials.iter().map(|z| plan_cost(z, gates, cfg).0).collect()
}

#[cfg(feature = "parallel")]
pub fn eval_population_par(trials: &[Vec<f64>], gates: &[Gate], cfg: &PlanConfig) -> Vec<f64> {
    trials.par_iter().map(|z| plan_cost(z, gates, cfg).0).collect()
}

/// Differential evolution over the interior control points. Deterministic
/// for a fixed seed; the best-so-far cost trace is non-increasing.
pub fn de_optimize(gates: &[Gate], cfg: &PlanConfig) -> (Vec<f64>, Vec<f64>) {
    let dim = 12 * gates.len();
    let np = cfg.pop_mult * dim;
    let bounds = de_bounds(gates, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|i| {
            if i == 0 {
                init_guess(gates, cfg)
            } else {
                (0..dim).map(|j| rng.gen_range(bounds.lo[j]..=bounds.hi[j])).collect()
            }
        })
        .collect();
    let mut costs = eval_population(&pop, gates, cfg);

    let mut trace = Vec::with_capacity(cfg.generations + 1);
    let best0 = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    trace.push(best0);

    let indices: Vec<usize> = (0..np).collect();
    for _gen in 0..cfg.generations {
        let f = rng.gen_range(cfg.f_range.0..=cfg.f_range.1);
        let mut trials: Vec<Vec<f64>> = Vec::with_capacity(np);
        for i in 0..np {
            // distinct a, b, c, all != i
            let mut picks = [0usize; 3];
            let mut chosen = 0;
            while chosen < 3 {
                let cand = *indices.choose(&mut rng).unwrap();
                if cand != i && !picks[..chosen].contains(&cand) {
                    picks[chosen] = cand;
                    chosen += 1;
                }
            }
            let (a, b, c) = (picks[0], picks[1], picks[2]);
            let jrand = rng.gen_range(0..dim);
            let mut trial = pop[i].clone();
            for j in 0..dim {
                if j == jrand || rng.gen::<f64>() < cfg.crossover {
                    let v = pop[a][j] + f * (pop[b][j] - pop[c][j]);
                    trial[j] = v.clamp(bounds.lo[j], bounds.hi[j]);
                }
            }
            trials.push(trial);
        }
        let trial_costs = eval_population(&trials, gates, cfg);
        for i in 0..np {
            if trial_costs[i] <= costs[i] {
                pop[i] = trials[i].clone();
                costs[i] = trial_costs[i];
            }
        }
        let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        trace.push(best);
    }

    let best_idx = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    (pop[best_idx].clone(), trace)
}

/// Quasi-Newton polish of a candidate with finite-difference gradients.
pub fn local_refine(z: &[f64], gates: &[Gate], cfg: &PlanConfig) -> Vec<f64> {
    let bounds = de_bounds(gates, cfg);
    let opts = SolveOptions {
        max_iters: cfg.refine_iters,
        grad_tol: 1e-6,
        memory: 10,
        budget_ms: None,
    };
    let out = solver::minimize_fd(|x| plan_cost(x, gates, cfg).0, z, &bounds, &opts, 1e-6);
    let (input_cost, _) = plan_cost(z, gates, cfg);
    if out.value <= input_cost {
        out.x
    } else {
        z.to_vec()
    }
}

/// Full pipeline: heuristic seed, DE, refinement.
pub fn plan(gates: &[Gate], cfg: &PlanConfig) -> Result<(RacePlan, Vec<f64>), PlanError> {
    if gates.len() < 2 {
        return Err(PlanError::TooFewGates(gates.len()));
    }
    for (i, g) in gates.iter().enumerate() {
        g.validate(i)?;
    }
    let (z_de, trace) = de_optimize(gates, cfg);
    let z = local_refine(&z_de, gates, cfg);
    let (cost, penalties) = plan_cost(&z, gates, cfg);
    let segments = assemble_segments(&z, gates);
    Ok((RacePlan { gates: gates.to_vec(), segments, cost, penalties }, trace))
}

/// Arc-length of a plan by fine quadrature.
pub fn plan_length(plan: &RacePlan) -> f64 {
    let mut total = 0.0;
    for seg in &plan.segments {
        let m = 512;
        let mut len = 0.0;
        for k in 0..=m {
            let t = k as f64 / m as f64;
            let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            let d = seg.d1(t);
            len += w * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
        total += len / (3.0 * m as f64);
    }
    total
}

/// Sample the plan into a closed waypoint path at approximately uniform arc
/// spacing, suitable for the spline fitting stage.
pub fn to_waypoints(plan: &RacePlan, spacing: f64) -> WaypointPath {
    let mut points = Vec::new();
    for seg in &plan.segments {
        // dense chord table per segment
        let dense = 1000;
        let mut ts = vec![0.0; dense + 1];
        let mut ss = vec![0.0; dense + 1];
        let mut prev = seg.eval(0.0);
        for k in 1..=dense {
            let t = k as f64 / dense as f64;
            let p = seg.eval(t);
            let d = [p[0] - prev[0], p[1] - prev[1], p[2] - prev[2]];
            ss[k] = ss[k - 1] + (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            ts[k] = t;
            prev = p;
        }
        let seg_len = ss[dense];
        let n_pts = (seg_len / spacing).round().max(2.0) as usize;
        let step = seg_len / n_pts as f64;
        let mut idx = 0;
        for k in 0..n_pts {
            let target = k as f64 * step;
            while idx + 1 < ss.len() && ss[idx + 1] < target {
                idx += 1;
            }
            let t = if ss[idx + 1] > ss[idx] {
                ts[idx] + (ts[idx + 1] - ts[idx]) * (target - ss[idx]) / (ss[idx + 1] - ss[idx])
            } else {
                ts[idx]
            };
            points.push(if k == 0 { seg.points[0] } else { seg.eval(t) });
        }
    }
    WaypointPath::new(points, true)
}
