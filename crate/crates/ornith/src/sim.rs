//! Closed-loop simulation harness: high-rate plant, 240 Hz sensing, 100 Hz
//! contouring control, lap metrics, and the ablation campaign.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{Estimator, EstimatorConfig};
use crate::flightlog::LogRecord;
use crate::model::{
    level_flap, plant_step, steady_state_speed, AblationMode, ControlInput, ControllerModel,
    ModelParams, VehicleState,
};
use crate::mpcc::{flap_feedforward, error_decompose, shift_warm_start, MpccConfig, MpccProblem};
use crate::refpath::ArcLengthSpline;
use crate::stats::{self, WelchResult};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    BadConfig(String),
    #[error("solver failed on {streak} consecutive ticks (t = {t:.2} s)")]
    SolverStreak { streak: usize, t: f64 },
    #[error("plant state non-finite at t = {0:.2} s")]
    NonFinite(f64),
    #[error("timed out after {elapsed:.1} s with {laps_done} of {laps} laps")]
    Timeout { elapsed: f64, laps_done: usize, laps: usize },
    #[error("empty flight log")]
    EmptyLog,
    #[error("path error: {0}")]
    Path(#[from] crate::refpath::PathError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopCondition {
    /// Stop once the projected progress crosses this many path lengths.
    Laps(usize),
    /// Fixed-duration run (open paths, convergence studies).
    Duration(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub sensor_rate_hz: f64,
    pub control_rate_hz: f64,
    /// Plant integration rate; must be a common multiple of both rates.
    pub plant_rate_hz: f64,
    /// Position measurement noise, m (each axis).
    pub sensor_noise_pos: f64,
    /// Yaw measurement noise, rad.
    pub sensor_noise_yaw: f64,
    pub battery_init_pct: f64,
    /// Linear discharge, percentage points per second.
    pub battery_discharge_rate: f64,
    /// Uniform plant-parameter perturbation fraction; 0 = matched plant.
    pub plant_perturbation: f64,
    pub stop: StopCondition,
    /// Hard wall on simulated time, s.
    pub timeout_s: f64,
    pub mode: AblationMode,
    pub seed: u64,
    /// Added to the on-path start position (convergence studies).
    pub initial_offset: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sensor_rate_hz: 240.0,
            control_rate_hz: 100.0,
            plant_rate_hz: 1200.0,
            sensor_noise_pos: 1e-3,
            sensor_noise_yaw: 2e-3,
            battery_init_pct: 100.0,
            battery_discharge_rate: 0.2,
            plant_perturbation: 0.05,
            stop: StopCondition::Laps(3),
            timeout_s: 120.0,
            mode: AblationMode::Full,
            seed: 0,
            initial_offset: [0.0; 3],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.sensor_rate_hz < self.control_rate_hz {
            return Err(SimError::BadConfig("sensor rate below control rate".into()));
        }
        for (rate, name) in [(self.sensor_rate_hz, "sensor"), (self.control_rate_hz, "control")] {
            let ratio = self.plant_rate_hz / rate;
            if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
                return Err(SimError::BadConfig(format!(
                    "plant rate not a multiple of {name} rate"
                )));
            }
        }
        if let StopCondition::Duration(d) = self.stop {
            if d <= 0.0 {
                return Err(SimError::BadConfig("non-positive duration".into()));
            }
        }
        Ok(())
    }
}

/// Uniform ±fraction perturbation of every dynamic parameter; the battery
/// mapping and trim are left matched (they are calibration constants, not
/// aerodynamics).
pub fn perturb_params(p: &ModelParams, fraction: f64, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut s = |v: f64| v * (1.0 + rng.gen_range(-fraction..=fraction));
    ModelParams {
        k_t: s(p.k_t),
        k_d: s(p.k_d),
        v_max: s(p.v_max),
        k_z: s(p.k_z),
        k_psi_z: s(p.k_psi_z),
        omega_n: s(p.omega_n),
        zeta: s(p.zeta),
        k_hdg: s(p.k_hdg),
        tau_psidd: s(p.tau_psidd),
        ..*p
    }
}

/// Mean feedforward flap over the path, used to freeze the nominal airspeed
/// for ablation (i).
pub fn mean_feedforward_flap(
    spline: &ArcLengthSpline,
    cfg: &MpccConfig,
    u_level: f64,
) -> f64 {
    let n = 200;
    let mut acc = 0.0;
    for k in 0..n {
        let theta = spline.total_length * k as f64 / n as f64;
        acc += flap_feedforward(theta, spline, u_level, cfg.k_gamma).unwrap_or(u_level);
    }
    acc / n as f64
}

/// Controller-side model for a given ablation mode; the plant is untouched.
pub fn make_ablation(
    mode: AblationMode,
    params: &ModelParams,
    cfg: &MpccConfig,
    spline: &ArcLengthSpline,
    battery_pct: f64,
) -> Result<ControllerModel, SimError> {
    let u_level = level_flap(params, battery_pct)?;
    let v_bar = steady_state_speed(mean_feedforward_flap(spline, cfg, u_level), params);
    Ok(ControllerModel { params: *params, mode, v_bar })
}

/// Closed-loop run: RK4 plant substeps, noisy position/yaw measurements into
/// the estimator at the sensor rate, MPCC solves at the control rate with the
/// command held in between. Returns one log row per control tick.
pub fn run_closed_loop(
    spline: &ArcLengthSpline,
    nominal: &ModelParams,
    est_cfg: &EstimatorConfig,
    sim_cfg: &SimConfig,
    mpcc_cfg: &MpccConfig,
) -> Result<Vec<LogRecord>, SimError> {
    sim_cfg.validate()?;
    nominal.validate()?;
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(sim_cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(sim_cfg.seed);
    noise_rng.set_stream(1);
    let plant_params = if sim_cfg.plant_perturbation > 0.0 {
        perturb_params(nominal, sim_cfg.plant_perturbation, &mut perturb_rng)
    } else {
        *nominal
    };

    let controller =
        make_ablation(sim_cfg.mode, nominal, mpcc_cfg, spline, sim_cfg.battery_init_pct)?;

    // start on the path, aligned with its tangent, at trim speed
    let u_level0 = level_flap(nominal, sim_cfg.battery_init_pct)?;
    let p0 = spline.eval(0.0);
    let t0 = spline.tangent(0.0)?;
    let v0 = steady_state_speed(u_level0, nominal);
    let tp0 = {
        let rpp = spline.deriv2(0.0);
        let dot = t0[0] * rpp[0] + t0[1] * rpp[1] + t0[2] * rpp[2];
        [rpp[0] - dot * t0[0], rpp[1] - dot * t0[1], rpp[2] - dot * t0[2]]
    };
    let signed_curv = t0[0] * tp0[1] - t0[1] * tp0[0];
    let mut truth = VehicleState {
        p_x: p0[0] + sim_cfg.initial_offset[0],
        p_y: p0[1] + sim_cfg.initial_offset[1],
        p_z: p0[2] + sim_cfg.initial_offset[2],
        psi: t0[1].atan2(t0[0]),
        v: v0,
        v_z: v0 * t0[2],
        a_z: 0.0,
        psi_dot: v0 * signed_curv,
        psi_ddot: 0.0,
    };

    let mut estimator = Estimator::with_state(est_cfg, &truth);
    let dt_plant = 1.0 / sim_cfg.plant_rate_hz;
    let dt_sensor = 1.0 / sim_cfg.sensor_rate_hz;
    let sensor_every = (sim_cfg.plant_rate_hz / sim_cfg.sensor_rate_hz).round() as usize;
    let control_every = (sim_cfg.plant_rate_hz / sim_cfg.control_rate_hz).round() as usize;

    let laps = match sim_cfg.stop {
        StopCondition::Laps(n) => n,
        StopCondition::Duration(_) => 0,
    };
    let t_end = match sim_cfg.stop {
        StopCondition::Duration(d) => d.min(sim_cfg.timeout_s),
        StopCondition::Laps(_) => sim_cfg.timeout_s,
    };
    let total_substeps = (t_end * sim_cfg.plant_rate_hz).round() as usize;

    let mut log: Vec<LogRecord> = Vec::new();
    let mut theta_hat = 0.0;
    let dt_control = 1.0 / sim_cfg.control_rate_hz;
    let mut warm = None;
    let mut since_shift = 0.0;
    let mut held = ControlInput { u_flap: u_level0, u_rud: -nominal.u_rud_trim };
    let mut streak = 0usize;
    let mut finished = false;
    let pos_noise = Normal::new(0.0, sim_cfg.sensor_noise_pos.max(f64::MIN_POSITIVE)).unwrap();
    let yaw_noise = Normal::new(0.0, sim_cfg.sensor_noise_yaw.max(f64::MIN_POSITIVE)).unwrap();

    for k in 0..total_substeps {
        let t = k as f64 * dt_plant;
        let battery =
            (sim_cfg.battery_init_pct - sim_cfg.battery_discharge_rate * t).max(0.0);

        if k % sensor_every == 0 {
            let p = truth.position();
            let meas = [
                p[0] + if sim_cfg.sensor_noise_pos > 0.0 { pos_noise.sample(&mut noise_rng) } else { 0.0 },
                p[1] + if sim_cfg.sensor_noise_pos > 0.0 { pos_noise.sample(&mut noise_rng) } else { 0.0 },
                p[2] + if sim_cfg.sensor_noise_pos > 0.0 { pos_noise.sample(&mut noise_rng) } else { 0.0 },
            ];
            let yaw = truth.psi
                + if sim_cfg.sensor_noise_yaw > 0.0 { yaw_noise.sample(&mut noise_rng) } else { 0.0 };
            estimator.step(dt_sensor, meas, yaw);
        }

        if k % control_every == 0 {
            let mut estimate = estimator.assemble_state();
            // the differentiator recovers d(v_z)/dt = a_z - k_psi_z*psi_dot^2;
            // the controller's a_z state needs the coupling added back (with
            // the controller model's own constant, zero under mode ii)
            estimate.a_z += controller.effective_k_psi_z() * estimate.psi_dot * estimate.psi_dot;
            theta_hat = spline.project(estimate.position(), theta_hat);
            let problem = MpccProblem {
                cfg: mpcc_cfg,
                model: &controller,
                spline,
                x0: estimate,
                theta0: theta_hat,
                u_level: level_flap(nominal, battery)?,
            };
            let (solve_ms, iters, converged) = match problem.solve(warm.as_ref()) {
                Ok(sol) => {
                    held = sol.first_command();
                    streak = 0;
                    let stats = (sol.solve_time_ms, sol.iterations as u32, sol.converged);
                    // the control period is shorter than the prediction step,
                    // so only shift the plan when a full step of real time
                    // has elapsed since the stage grid was laid down
                    since_shift += dt_control;
                    let mut next = sol;
                    while since_shift >= mpcc_cfg.dt - 1e-9 {
                        next = shift_warm_start(&next, mpcc_cfg);
                        since_shift -= mpcc_cfg.dt;
                    }
                    warm = Some(next);
                    stats
                }
                Err(_) => {
                    streak += 1;
                    warm = None;
                    if streak > 10 {
                        return Err(SimError::SolverStreak { streak, t });
                    }
                    (0.0, 0, false)
                }
            };
            log.push(LogRecord {
                t,
                truth,
                estimate,
                u_flap: held.u_flap,
                u_rud: held.u_rud,
                theta: theta_hat,
                battery_pct: battery,
                solve_ms,
                iters,
                converged,
            });
            if laps > 0 && theta_hat >= laps as f64 * spline.total_length {
                finished = true;
                break;
            }
        }

        truth = plant_step(&truth, &held, &plant_params, battery, dt_plant)?;
        if !truth.is_finite() {
            return Err(SimError::NonFinite(t));
        }
    }

    if log.is_empty() {
        return Err(SimError::EmptyLog);
    }
    if laps > 0 && !finished {
        let laps_done = (theta_hat / spline.total_length).floor() as usize;
        return Err(SimError::Timeout { elapsed: t_end, laps_done, laps });
    }
    Ok(log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LapMetrics {
    pub xy_mean_cm: f64,
    pub xy_std_cm: f64,
    pub xy_max_cm: f64,
    pub alt_mean_cm: f64,
    pub alt_std_cm: f64,
    pub alt_max_cm: f64,
    pub e3d_mean_cm: f64,
    pub e3d_std_cm: f64,
    pub e3d_max_cm: f64,
    pub solve_ms_mean: f64,
    pub solve_ms_p95: f64,
    pub lap_times_s: Vec<f64>,
}

fn mean_std_max(xs: &[f64]) -> (f64, f64, f64) {
    let mean = stats::mean(xs);
    let std = if xs.len() > 1 { stats::variance(xs).sqrt() } else { 0.0 };
    let max = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    (mean, std, max)
}

/// Cross-track statistics of the true position against the reference,
/// projected from each row's progress estimate.
pub fn compute_metrics(log: &[LogRecord], spline: &ArcLengthSpline) -> Result<LapMetrics, SimError> {
    if log.is_empty() {
        return Err(SimError::EmptyLog);
    }
    let mut xy = Vec::with_capacity(log.len());
    let mut alt = Vec::with_capacity(log.len());
    let mut e3d = Vec::with_capacity(log.len());
    for row in log {
        let p = row.truth.position();
        let theta = spline.project(p, row.theta);
        let (_, e_cont) = error_decompose(p, theta, spline)?;
        let h = (e_cont[0] * e_cont[0] + e_cont[1] * e_cont[1]).sqrt();
        let v = e_cont[2].abs();
        xy.push(h * 100.0);
        alt.push(v * 100.0);
        e3d.push((h * h + v * v).sqrt() * 100.0);
    }
    let solve: Vec<f64> = log.iter().filter(|r| r.converged || r.iters > 0).map(|r| r.solve_ms).collect();
    let solve = if solve.is_empty() { vec![0.0] } else { solve };
    let mut lap_times = Vec::new();
    let mut next_lap = 1.0;
    for row in log {
        let length = spline.total_length;
        while row.theta >= next_lap * length {
            lap_times.push(row.t);
            next_lap += 1.0;
        }
    }
    // report per-lap durations rather than crossing timestamps
    let mut prev = 0.0;
    for t in lap_times.iter_mut() {
        let dur = *t - prev;
        prev = *t;
        *t = dur;
    }
    let (xy_mean, xy_std, xy_max) = mean_std_max(&xy);
    let (alt_mean, alt_std, alt_max) = mean_std_max(&alt);
    let (e_mean, e_std, e_max) = mean_std_max(&e3d);
    Ok(LapMetrics {
        xy_mean_cm: xy_mean,
        xy_std_cm: xy_std,
        xy_max_cm: xy_max,
        alt_mean_cm: alt_mean,
        alt_std_cm: alt_std,
        alt_max_cm: alt_max,
        e3d_mean_cm: e_mean,
        e3d_std_cm: e_std,
        e3d_max_cm: e_max,
        solve_ms_mean: stats::mean(&solve),
        solve_ms_p95: stats::percentile(&solve, 0.95),
        lap_times_s: lap_times,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub mode: String,
    /// Per-run mean 3D cross-track error, cm; one sample per completed run.
    pub samples: Vec<f64>,
    pub aborted_runs: usize,
    pub metrics: Vec<LapMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationComparison {
    pub mode: String,
    pub welch: Option<WelchResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub outcomes: Vec<ModeOutcome>,
    /// Welch tests of each mode against the full controller.
    pub comparisons: Vec<AblationComparison>,
}

fn run_seed(master: u64, index: u64) -> u64 {
    master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One independent run per sample, each with its own seed (so plant
/// perturbation and noise are redrawn); the sample is the run's mean 3D
/// cross-track error.
pub fn run_mode_batch(
    spline: &ArcLengthSpline,
    nominal: &ModelParams,
    est_cfg: &EstimatorConfig,
    base: &SimConfig,
    mpcc_cfg: &MpccConfig,
    mode: AblationMode,
    runs: usize,
) -> ModeOutcome {
    let run_one = |i: usize| -> Option<LapMetrics> {
        let cfg = SimConfig { mode, seed: run_seed(base.seed, i as u64), ..*base };
        let log = run_closed_loop(spline, nominal, est_cfg, &cfg, mpcc_cfg).ok()?;
        compute_metrics(&log, spline).ok()
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Option<LapMetrics>> = (0..runs).into_par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Option<LapMetrics>> = (0..runs).map(run_one).collect();

    let mut outcome = ModeOutcome {
        mode: mode.label().to_string(),
        samples: Vec::new(),
        aborted_runs: 0,
        metrics: Vec::new(),
    };
    for r in results {
        match r {
            Some(m) => {
                outcome.samples.push(m.e3d_mean_cm);
                outcome.metrics.push(m);
            }
            None => outcome.aborted_runs += 1,
        }
    }
    outcome
}

/// Full campaign across controller variants, with Welch tests against the
/// full model where both sides completed at least two runs.
pub fn ablation_campaign(
    spline: &ArcLengthSpline,
    nominal: &ModelParams,
    est_cfg: &EstimatorConfig,
    base: &SimConfig,
    mpcc_cfg: &MpccConfig,
    modes: &[AblationMode],
    runs: usize,
) -> AblationReport {
    let outcomes: Vec<ModeOutcome> = modes
        .iter()
        .map(|&m| run_mode_batch(spline, nominal, est_cfg, base, mpcc_cfg, m, runs))
        .collect();
    let full = outcomes.iter().find(|o| o.mode == "full");
    let comparisons = outcomes
        .iter()
        .filter(|o| o.mode != "full")
        .map(|o| AblationComparison {
            mode: o.mode.clone(),
            welch: full.and_then(|f| stats::welch_t_test(&o.samples, &f.samples)),
        })
        .collect();
    AblationReport { outcomes, comparisons }
}
