//! Sequential parameter identification from dedicated flight maneuvers.
//!
//! Stage order matters: battery mapping first (it defines the level-flap
//! command used by the vertical model), then forward speed, rudder trim,
//! heading chain, vertical dynamics, and finally the turn/altitude coupling.
//! Each stage consumes parameters fitted by the previous ones.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    level_flap, plant_step, steady_state_speed, ControlInput, ModelParams, VehicleState,
};
use crate::solver::{self, BoxBounds, SolveOptions};

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("log invalid: {0}")]
    BadLog(String),
    #[error("no sign change in mean heading rate across rudder segments")]
    NoBracket,
    #[error("ill-conditioned fit (condition estimate {0:.3e})")]
    IllConditioned(f64),
    #[error("degenerate maneuver: {0}")]
    Degenerate(String),
    #[error("insufficient excitation: peak |psi_dot| {0:.3} rad/s below 0.5")]
    InsufficientExcitation(f64),
    #[error("optimizer diverged (best residual {0:.3e})")]
    Divergence(f64),
    #[error("missing maneuver class: {0}")]
    MissingManeuver(&'static str),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<IdentError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManeuverClass {
    LevelFlight,
    StraightSteps,
    TrimSegments,
    RudderSteps,
    FlapSteps,
    Turns,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ManeuverSample {
    pub t: f64,
    pub state: VehicleState,
    pub control: ControlInput,
    pub battery_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManeuverLog {
    pub class: ManeuverClass,
    pub samples: Vec<ManeuverSample>,
}

impl ManeuverLog {
    pub fn dt(&self) -> f64 {
        self.samples[1].t - self.samples[0].t
    }

    /// Strictly increasing timestamps at a uniform rate (within 1%).
    pub fn validate(&self) -> Result<(), IdentError> {
        if self.samples.len() < 3 {
            return Err(IdentError::BadLog("fewer than 3 samples".into()));
        }
        let dt = self.dt();
        if dt <= 0.0 {
            return Err(IdentError::BadLog("non-increasing timestamps".into()));
        }
        for w in self.samples.windows(2) {
            let step = w[1].t - w[0].t;
            if step <= 0.0 || (step - dt).abs() > 0.01 * dt {
                return Err(IdentError::BadLog(format!(
                    "non-uniform sample interval {step} vs {dt}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_v: f64,
    pub sigma_vz: f64,
    pub sigma_az: f64,
    pub sigma_psid: f64,
    pub sigma_psidd: f64,
    /// Applied to the logged flap command in the level-flight log only.
    pub sigma_flap: f64,
}

impl NoiseSpec {
    /// Magnitudes comparable to the estimator's steady-state errors.
    pub fn estimator_grade() -> Self {
        Self {
            sigma_v: 0.01,
            sigma_vz: 0.005,
            sigma_az: 0.05,
            sigma_psid: 0.01,
            sigma_psidd: 0.1,
            sigma_flap: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub stage: String,
    pub rms_residual: f64,
    pub condition: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IdentReport {
    pub stages: Vec<StageDiagnostics>,
}

impl IdentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

// ---------------------------------------------------------------------------
// Synthetic maneuver campaign
// ---------------------------------------------------------------------------

const SYNTH_DT: f64 = 0.005;
const SYNTH_BATTERY: f64 = 70.0;

struct Noiser {
    rng: ChaCha8Rng,
    spec: Option<NoiseSpec>,
}

impl Noiser {
    fn new(spec: Option<NoiseSpec>, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spec }
    }

    fn gauss(&mut self, sigma: f64) -> f64 {
        match &self.spec {
            Some(_) if sigma > 0.0 => Normal::new(0.0, sigma).unwrap().sample(&mut self.rng),
            _ => 0.0,
        }
    }

    fn corrupt(&mut self, mut s: VehicleState) -> VehicleState {
        if let Some(spec) = self.spec {
            s.v += self.gauss(spec.sigma_v);
            s.v_z += self.gauss(spec.sigma_vz);
            s.a_z += self.gauss(spec.sigma_az);
            s.psi_dot += self.gauss(spec.sigma_psid);
            s.psi_ddot += self.gauss(spec.sigma_psidd);
        }
        s
    }
}

/// Flap fraction whose steady speed equals `v` under `p` (inverse of the
/// steady-state speed relation).
fn flap_for_speed(v: f64, p: &ModelParams) -> f64 {
    p.k_d * v / (p.k_t * (1.0 - v / p.v_max))
}

fn simulate_log(
    truth: &ModelParams,
    class: ManeuverClass,
    x0: VehicleState,
    script: &[(f64, ControlInput)], // (duration s, held command)
    noiser: &mut Noiser,
) -> ManeuverLog {
    let mut samples = Vec::new();
    let mut x = x0;
    let mut t = 0.0;
    for (duration, u) in script {
        let steps = (duration / SYNTH_DT).round() as usize;
        for _ in 0..steps {
            samples.push(ManeuverSample {
                t,
                state: noiser.corrupt(x),
                control: *u,
                battery_pct: SYNTH_BATTERY,
            });
            x = plant_step(&x, u, truth, SYNTH_BATTERY, SYNTH_DT).expect("synthetic plant step");
            t += SYNTH_DT;
        }
    }
    samples.push(ManeuverSample {
        t,
        state: noiser.corrupt(x),
        control: script.last().unwrap().1,
        battery_pct: SYNTH_BATTERY,
    });
    ManeuverLog { class, samples }
}

/// Fixed maneuver scripts so round-trip tests are reproducible: a battery
/// discharge sweep, four flap levels from rest, two trim brackets, rudder
/// steps at two airspeeds, a flap step, and two turn-rate ramps.
pub fn synth_campaign(
    truth: &ModelParams,
    noise: Option<NoiseSpec>,
    seed: u64,
) -> Vec<ManeuverLog> {
    let mut noiser = Noiser::new(noise, seed);
    let mut logs = Vec::new();

    // level flight across a 40-point discharge; only the regression between
    // flap and battery matters, so states are held at trim
    {
        let mut samples = Vec::new();
        let n = 600;
        for k in 0..n {
            let t = k as f64 * 0.05;
            let batt = 100.0 - 40.0 * k as f64 / (n - 1) as f64;
            let mut u_flap = level_flap(truth, batt).expect("level flap");
            u_flap = (u_flap + noiser.gauss(noise.map_or(0.0, |s| s.sigma_flap))).clamp(0.0, 1.0);
            let state = VehicleState {
                v: steady_state_speed(u_flap, truth),
                ..VehicleState::default()
            };
            samples.push(ManeuverSample {
                t,
                state,
                control: ControlInput { u_flap, u_rud: -truth.u_rud_trim },
                battery_pct: batt,
            });
        }
        logs.push(ManeuverLog { class: ManeuverClass::LevelFlight, samples });
    }

    let rest = VehicleState::default();
    let straight = |u_flap: f64| ControlInput { u_flap, u_rud: -truth.u_rud_trim };

    // forward-speed transients at four flap levels, each from rest
    for u in [0.5, 0.7, 0.85, 1.0] {
        logs.push(simulate_log(
            truth,
            ManeuverClass::StraightSteps,
            rest,
            &[(8.0, straight(u))],
            &mut noiser,
        ));
    }

    // trim brackets: constant rudder offsets either side of the unknown trim
    let trim_flap = flap_for_speed(1.8, truth);
    let cruise = VehicleState { v: 1.8, ..rest };
    for delta in [-0.05, 0.05] {
        logs.push(simulate_log(
            truth,
            ManeuverClass::TrimSegments,
            cruise,
            &[(6.0, ControlInput { u_flap: trim_flap, u_rud: -truth.u_rud_trim + delta })],
            &mut noiser,
        ));
    }

    // rudder steps at two airspeeds (speed held at its equilibrium)
    for v in [1.0, 2.0] {
        let u_flap = flap_for_speed(v, truth);
        let x0 = VehicleState { v, ..rest };
        logs.push(simulate_log(
            truth,
            ManeuverClass::RudderSteps,
            x0,
            &[
                (1.0, ControlInput { u_flap, u_rud: -truth.u_rud_trim }),
                (3.0, ControlInput { u_flap, u_rud: -truth.u_rud_trim + 0.2 }),
                (2.0, ControlInput { u_flap, u_rud: -truth.u_rud_trim }),
            ],
            &mut noiser,
        ));
    }

    // flap step during straight flight
    {
        let u_level = level_flap(truth, SYNTH_BATTERY).expect("level flap");
        let x0 = VehicleState { v: steady_state_speed(u_level, truth), ..rest };
        logs.push(simulate_log(
            truth,
            ManeuverClass::FlapSteps,
            x0,
            &[
                (1.0, straight(u_level)),
                (4.0, straight((u_level + 0.15).min(1.0))),
                (3.0, straight(u_level)),
            ],
            &mut noiser,
        ));
    }

    // turn-rate ramps at two rudder amplitudes
    for amp in [0.1, 0.2] {
        let u_flap = flap_for_speed(2.0, truth);
        let x0 = VehicleState { v: 2.0, ..rest };
        logs.push(simulate_log(
            truth,
            ManeuverClass::Turns,
            x0,
            &[
                (0.5, ControlInput { u_flap, u_rud: -truth.u_rud_trim }),
                (4.0, ControlInput { u_flap, u_rud: -truth.u_rud_trim - amp }),
            ],
            &mut noiser,
        ));
    }

    logs
}

// ---------------------------------------------------------------------------
// Fit helpers
// ---------------------------------------------------------------------------

/// Ordinary least squares y = slope*x + intercept.
fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Multi-start bounded least squares in a log-free scaled space: each
/// parameter is optimized as a ratio to its initializer, which equalizes
/// scales across parameters of very different magnitude.
fn scaled_nls<F>(init: &[f64], residual_rms: F, max_iters: usize) -> Result<(Vec<f64>, f64), IdentError>
where
    F: Fn(&[f64]) -> f64,
{
    let dim = init.len();
    let bounds = BoxBounds::new(vec![0.2; dim], vec![5.0; dim]);
    let opts = SolveOptions { max_iters, grad_tol: 1e-10, memory: 8, budget_ms: None };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for factor in [1.0, 0.7, 1.3] {
        let x0 = vec![factor; dim];
        let out = solver::minimize_fd(
            |r| {
                let p: Vec<f64> = r.iter().zip(init).map(|(ri, i)| ri * i).collect();
                residual_rms(&p)
            },
            &x0,
            &bounds,
            &opts,
            1e-7,
        );
        if out.value.is_finite() && best.as_ref().map_or(true, |(_, v)| out.value < *v) {
            let p: Vec<f64> = out.x.iter().zip(init).map(|(ri, i)| ri * i).collect();
            best = Some((p, out.value));
        }
    }
    best.ok_or(IdentError::Divergence(f64::INFINITY))
}

/// Condition estimate of the residual Jacobian (finite differences), as the
/// singular-value ratio.
fn condition_estimate<F>(params: &[f64], residuals: F) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let r0 = residuals(params);
    let m = r0.len();
    let n = params.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let h = 1e-6 * params[j].abs().max(1e-6);
        let mut p = params.to_vec();
        p[j] += h;
        let rp = residuals(&p);
        p[j] -= 2.0 * h;
        let rm = residuals(&p);
        for i in 0..m {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    let svd = jac.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Stage fits
// ---------------------------------------------------------------------------

/// Battery-to-level-flap mapping by OLS on near-level samples.
pub fn fit_battery(log: &ManeuverLog) -> Result<(f64, f64), IdentError> {
    log.validate()?;
    let qualifying: Vec<&ManeuverSample> =
        log.samples.iter().filter(|s| s.state.v_z.abs() < 0.05).collect();
    if qualifying.len() < 10 {
        return Err(IdentError::InsufficientData(format!(
            "{} level samples, need 10",
            qualifying.len()
        )));
    }
    let span = qualifying.iter().map(|s| s.battery_pct).fold(f64::NEG_INFINITY, f64::max)
        - qualifying.iter().map(|s| s.battery_pct).fold(f64::INFINITY, f64::min);
    if span < 30.0 {
        return Err(IdentError::InsufficientData(format!(
            "discharge span {span:.1} points, need 30"
        )));
    }
    let xs: Vec<f64> = qualifying.iter().map(|s| s.battery_pct).collect();
    let ys: Vec<f64> = qualifying.iter().map(|s| s.control.u_flap).collect();
    let (a, c) = ols(&xs, &ys);
    Ok((a, c))
}

/// RK4 of the scalar forward-speed equation with held commands per sample.
fn sim_forward_speed(k_t: f64, k_d: f64, v_max: f64, v0: f64, us: &[f64], dt: f64) -> Vec<f64> {
    let f = |v: f64, u: f64| k_t * u * (1.0 - v / v_max).max(0.0) - k_d * v;
    let mut v = v0;
    let mut out = Vec::with_capacity(us.len() + 1);
    out.push(v);
    for &u in us {
        let k1 = f(v, u);
        let k2 = f(v + 0.5 * dt * k1, u);
        let k3 = f(v + 0.5 * dt * k2, u);
        let k4 = f(v + dt * k3, u);
        v = (v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).max(0.0);
        out.push(v);
    }
    out
}

fn forward_residuals(p: &[f64], logs: &[&ManeuverLog]) -> Vec<f64> {
    let mut res = Vec::new();
    for log in logs {
        let dt = log.dt();
        let us: Vec<f64> = log.samples[..log.samples.len() - 1]
            .iter()
            .map(|s| s.control.u_flap)
            .collect();
        let sim = sim_forward_speed(p[0], p[1], p[2], log.samples[0].state.v, &us, dt);
        for (s, v) in log.samples.iter().zip(sim) {
            res.push(v - s.state.v);
        }
    }
    res
}

/// Forward-speed parameters by simulation-error least squares, initialized
/// from the steady-state relation 1/v_ss = 1/v_max + (k_d/k_t)/u.
pub fn fit_forward(logs: &[&ManeuverLog]) -> Result<((f64, f64, f64), f64, f64), IdentError> {
    if logs.is_empty() {
        return Err(IdentError::InsufficientData("no forward-speed logs".into()));
    }
    for log in logs {
        log.validate()?;
    }
    // steady-state pairs from each log's tail
    let mut levels: Vec<(f64, f64)> = Vec::new();
    for log in logs {
        let u = log.samples[0].control.u_flap;
        let tail = &log.samples[log.samples.len() * 3 / 4..];
        let v_ss = tail.iter().map(|s| s.state.v).sum::<f64>() / tail.len() as f64;
        if !levels.iter().any(|(lu, _)| (lu - u).abs() < 1e-9) {
            levels.push((u, v_ss));
        }
    }
    let (mut k_t, mut k_d, mut v_max) = (4.0, 0.3, 3.0);
    if levels.len() >= 2 {
        let xs: Vec<f64> = levels.iter().map(|(u, _)| 1.0 / u).collect();
        let ys: Vec<f64> = levels.iter().map(|(_, v)| 1.0 / v).collect();
        let (slope, intercept) = ols(&xs, &ys);
        if intercept > 0.0 {
            v_max = 1.0 / intercept;
        }
        // initial acceleration from rest isolates k_t
        if let Some(log) = logs.iter().find(|l| l.samples[0].state.v < 0.1) {
            let dt = log.dt();
            let dv = log.samples[1].state.v - log.samples[0].state.v;
            k_t = (dv / dt / log.samples[0].control.u_flap).max(0.1);
        }
        if slope > 0.0 {
            k_d = (slope * k_t).max(1e-3);
        }
    } else {
        // single operating point: seed from its equilibrium, expect the
        // condition check below to reject
        let (u, v_ss) = levels[0];
        v_max = 1.5 * v_ss;
        k_d = k_t * u * (1.0 / v_ss - 1.0 / v_max);
    }

    let (p, value) = scaled_nls(&[k_t, k_d, v_max], |p| rms(&forward_residuals(p, logs)), 200)?;
    if !value.is_finite() {
        return Err(IdentError::Divergence(value));
    }
    let cond = condition_estimate(&p, |p| forward_residuals(p, logs));
    if cond > 1e6 {
        return Err(IdentError::IllConditioned(cond));
    }
    Ok(((p[0], p[1], p[2]), cond, value))
}

/// Rudder trim from constant-rudder segments: interpolate mean heading rate
/// to its zero crossing and negate the command there.
pub fn fit_rudder_trim(logs: &[&ManeuverLog]) -> Result<f64, IdentError> {
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for log in logs {
        log.validate()?;
        let u = log.samples[0].control.u_rud;
        if log.samples.iter().any(|s| (s.control.u_rud - u).abs() > 1e-12) {
            return Err(IdentError::BadLog("rudder not constant within segment".into()));
        }
        let tail = &log.samples[log.samples.len() / 2..];
        let mean_psid = tail.iter().map(|s| s.state.psi_dot).sum::<f64>() / tail.len() as f64;
        pairs.push((u, mean_psid));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in pairs.windows(2) {
        let ((u0, r0), (u1, r1)) = (w[0], w[1]);
        if r0 == 0.0 {
            return Ok(-u0);
        }
        if r0 * r1 < 0.0 {
            let u_zero = u0 - r0 * (u1 - u0) / (r1 - r0);
            return Ok(-u_zero);
        }
    }
    if let Some(&(u, r)) = pairs.last() {
        if r == 0.0 {
            return Ok(-u);
        }
    }
    Err(IdentError::NoBracket)
}

/// RK4 of the heading chain (psi_dot, psi_ddot) with logged airspeed held
/// over each sample interval.
fn sim_heading_chain(
    k_hdg: f64,
    tau: f64,
    trim: f64,
    log: &ManeuverLog,
) -> Vec<f64> {
    let dt = log.dt();
    let mut pd = log.samples[0].state.psi_dot;
    let mut pdd = log.samples[0].state.psi_ddot;
    let mut out = Vec::with_capacity(log.samples.len());
    out.push(pd);
    for s in &log.samples[..log.samples.len() - 1] {
        let cmd = k_hdg * (s.control.u_rud + trim) * s.state.v;
        let f = |x: (f64, f64)| (x.1, (cmd - x.1) / tau);
        let k1 = f((pd, pdd));
        let k2 = f((pd + 0.5 * dt * k1.0, pdd + 0.5 * dt * k1.1));
        let k3 = f((pd + 0.5 * dt * k2.0, pdd + 0.5 * dt * k2.1));
        let k4 = f((pd + dt * k3.0, pdd + dt * k3.1));
        pd += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        pdd += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        out.push(pd);
    }
    out
}

fn heading_residuals(p: &[f64], trim: f64, logs: &[&ManeuverLog]) -> Vec<f64> {
    let mut res = Vec::new();
    for log in logs {
        let sim = sim_heading_chain(p[0], p[1], trim, log);
        for (s, pd) in log.samples.iter().zip(sim) {
            res.push(pd - s.state.psi_dot);
        }
    }
    res
}

/// Heading-chain gain and lag from rudder step responses.
pub fn fit_heading(logs: &[&ManeuverLog], trim: f64) -> Result<((f64, f64), f64), IdentError> {
    if logs.is_empty() {
        return Err(IdentError::InsufficientData("no rudder-step logs".into()));
    }
    let mut max_excursion: f64 = 0.0;
    for log in logs {
        log.validate()?;
        for s in &log.samples {
            max_excursion = max_excursion.max((s.control.u_rud - log.samples[0].control.u_rud).abs());
        }
    }
    if max_excursion < 1e-9 {
        return Err(IdentError::Degenerate("zero-amplitude rudder step".into()));
    }
    // gain initializer from the largest settled angular acceleration
    let mut k_init = -5.0;
    for log in logs {
        for s in &log.samples {
            let drive = (s.control.u_rud + trim) * s.state.v;
            if drive.abs() > 0.05 && s.state.psi_ddot.abs() > 1e-3 {
                k_init = s.state.psi_ddot / drive;
            }
        }
    }
    let (p, value) = scaled_nls(&[k_init, 0.1], |p| rms(&heading_residuals(p, trim, logs)), 200)?;
    if !value.is_finite() {
        return Err(IdentError::Divergence(value));
    }
    Ok(((p[0], p[1]), value))
}

/// RK4 of the vertical pair (v_z, a_z) with the coupling term zeroed.
fn sim_vertical(
    k_z: f64,
    omega_n: f64,
    zeta: f64,
    a_batt: f64,
    c_batt: f64,
    log: &ManeuverLog,
) -> Vec<f64> {
    let dt = log.dt();
    let mut vz = log.samples[0].state.v_z;
    let mut az = log.samples[0].state.a_z;
    let mut out = Vec::with_capacity(log.samples.len());
    out.push(vz);
    for s in &log.samples[..log.samples.len() - 1] {
        let u_level = (a_batt * s.battery_pct + c_batt).clamp(0.0, 1.0);
        let target = k_z * (s.control.u_flap - u_level);
        let f = |x: (f64, f64)| {
            (x.1, omega_n * omega_n * (target - x.0) - 2.0 * zeta * omega_n * x.1)
        };
        let k1 = f((vz, az));
        let k2 = f((vz + 0.5 * dt * k1.0, az + 0.5 * dt * k1.1));
        let k3 = f((vz + 0.5 * dt * k2.0, az + 0.5 * dt * k2.1));
        let k4 = f((vz + dt * k3.0, az + dt * k3.1));
        vz += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        az += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        out.push(vz);
    }
    out
}

fn vertical_residuals(p: &[f64], a_batt: f64, c_batt: f64, logs: &[&ManeuverLog]) -> Vec<f64> {
    let mut res = Vec::new();
    for log in logs {
        let sim = sim_vertical(p[0], p[1], p[2], a_batt, c_batt, log);
        for (s, vz) in log.samples.iter().zip(sim) {
            res.push(vz - s.state.v_z);
        }
    }
    res
}

/// Vertical-dynamics parameters from flap steps in straight flight.
pub fn fit_vertical(
    logs: &[&ManeuverLog],
    a_batt: f64,
    c_batt: f64,
) -> Result<((f64, f64, f64), f64), IdentError> {
    if logs.is_empty() {
        return Err(IdentError::InsufficientData("no flap-step logs".into()));
    }
    let mut max_step: f64 = 0.0;
    for log in logs {
        log.validate()?;
        for s in &log.samples {
            if s.state.psi_dot.abs() > 0.05 {
                return Err(IdentError::BadLog("heading rate exceeds 0.05 rad/s".into()));
            }
            max_step = max_step.max((s.control.u_flap - log.samples[0].control.u_flap).abs());
        }
    }
    if max_step < 1e-9 {
        return Err(IdentError::Degenerate("zero-magnitude flap step".into()));
    }
    // k_z initializer from the settled climb rate of the largest step
    let mut k_init = 1.0;
    for log in logs {
        let u_level =
            (a_batt * log.samples[0].battery_pct + c_batt).clamp(0.0, 1.0);
        for s in &log.samples {
            let delta = s.control.u_flap - u_level;
            if delta.abs() > 0.02 && s.state.v_z.abs() > 1e-3 {
                k_init = (s.state.v_z / delta).abs().max(0.1);
            }
        }
    }
    let (p, value) = scaled_nls(
        &[k_init, 3.0, 0.3],
        |p| rms(&vertical_residuals(p, a_batt, c_batt, logs)),
        300,
    )?;
    if !value.is_finite() {
        return Err(IdentError::Divergence(value));
    }
    Ok(((p[0], p[1], p[2]), value))
}

/// Turn/altitude coupling by regressing the integrated climb-rate deficit
/// against the integrated squared heading rate. Integration avoids
/// differentiating noisy climb-rate samples.
pub fn fit_turn_coupling(logs: &[&ManeuverLog]) -> Result<(f64, f64), IdentError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut peak: f64 = 0.0;
    for log in logs {
        log.validate()?;
        let dt = log.dt();
        let mut int_az = 0.0;
        let mut int_psid2 = 0.0;
        let s0 = &log.samples[0];
        for w in log.samples.windows(2) {
            peak = peak.max(w[1].state.psi_dot.abs());
            int_az += 0.5 * dt * (w[0].state.a_z + w[1].state.a_z);
            int_psid2 += 0.5
                * dt
                * (w[0].state.psi_dot.powi(2) + w[1].state.psi_dot.powi(2));
            // v_z(t) - v_z(0) - ∫a_z = -k · ∫psi_dot²
            ys.push(w[1].state.v_z - s0.state.v_z - int_az);
            xs.push(-int_psid2);
        }
    }
    if peak <= 0.5 {
        return Err(IdentError::InsufficientExcitation(peak));
    }
    let (slope, intercept) = ols(&xs, &ys);
    let resid = rms(
        &xs.iter()
            .zip(&ys)
            .map(|(x, y)| y - slope * x - intercept)
            .collect::<Vec<f64>>(),
    );
    Ok((slope, resid))
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

fn by_class<'a>(logs: &'a [ManeuverLog], class: ManeuverClass) -> Vec<&'a ManeuverLog> {
    logs.iter().filter(|l| l.class == class).collect()
}

fn stage<T>(name: &'static str, r: Result<T, IdentError>) -> Result<T, IdentError> {
    r.map_err(|e| IdentError::Stage { stage: name, source: Box::new(e) })
}

/// Run all six fits in order; later stages consume earlier results.
pub fn identify_all(logs: &[ManeuverLog]) -> Result<(ModelParams, IdentReport), IdentError> {
    let level = by_class(logs, ManeuverClass::LevelFlight);
    let fwd = by_class(logs, ManeuverClass::StraightSteps);
    let trim_logs = by_class(logs, ManeuverClass::TrimSegments);
    let rudder = by_class(logs, ManeuverClass::RudderSteps);
    let flap = by_class(logs, ManeuverClass::FlapSteps);
    let turns = by_class(logs, ManeuverClass::Turns);
    for (name, group) in [
        ("level-flight", &level),
        ("straight-steps", &fwd),
        ("trim-segments", &trim_logs),
        ("rudder-steps", &rudder),
        ("flap-steps", &flap),
        ("turns", &turns),
    ] {
        if group.is_empty() {
            return Err(IdentError::MissingManeuver(name));
        }
    }

    let mut report = IdentReport::default();
    let mut params = ModelParams::default();

    let (a_batt, c_batt) = stage("battery", fit_battery(level[0]))?;
    params.a_batt = a_batt;
    params.c_batt = c_batt;
    report.stages.push(StageDiagnostics {
        stage: "battery".into(),
        rms_residual: 0.0,
        condition: None,
        note: format!("a={a_batt:.6e} c={c_batt:.6}"),
    });

    let ((k_t, k_d, v_max), cond, resid) = stage("forward", fit_forward(&fwd))?;
    params.k_t = k_t;
    params.k_d = k_d;
    params.v_max = v_max;
    report.stages.push(StageDiagnostics {
        stage: "forward".into(),
        rms_residual: resid,
        condition: Some(cond),
        note: String::new(),
    });

    let trim = stage("trim", fit_rudder_trim(&trim_logs))?;
    params.u_rud_trim = trim;
    report.stages.push(StageDiagnostics {
        stage: "trim".into(),
        rms_residual: 0.0,
        condition: None,
        note: format!("trim={trim:.6}"),
    });

    let ((k_hdg, tau), resid) = stage("heading", fit_heading(&rudder, trim))?;
    params.k_hdg = k_hdg;
    params.tau_psidd = tau;
    report.stages.push(StageDiagnostics {
        stage: "heading".into(),
        rms_residual: resid,
        condition: None,
        note: String::new(),
    });

    let ((k_z, omega_n, zeta), resid) = stage("vertical", fit_vertical(&flap, a_batt, c_batt))?;
    params.k_z = k_z;
    params.omega_n = omega_n;
    params.zeta = zeta;
    report.stages.push(StageDiagnostics {
        stage: "vertical".into(),
        rms_residual: resid,
        condition: None,
        note: String::new(),
    });

    let (k_psi_z, resid) = stage("coupling", fit_turn_coupling(&turns))?;
    params.k_psi_z = k_psi_z;
    report.stages.push(StageDiagnostics {
        stage: "coupling".into(),
        rms_residual: resid,
        condition: None,
        note: String::new(),
    });

    Ok((params, report))
}
