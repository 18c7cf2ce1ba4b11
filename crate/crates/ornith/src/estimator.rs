//! State estimation from simulated motion-capture measurements.
//!
//! A six-state constant-velocity Kalman filter reconstructs position and
//! velocity, a two-state filter tracks heading and heading rate, and two
//! low-pass-filtered differentiators recover vertical acceleration and
//! heading acceleration.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::model::VehicleState;

/// Speed below which velocity-derived heading is unreliable, m/s.
pub const HEADING_SPEED_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Position measurement noise per axis, m.
    pub meas_sigma_pos: f64,
    /// Yaw measurement noise, rad.
    pub meas_sigma_yaw: f64,
    /// Horizontal acceleration process noise, m/s².
    pub proc_sigma_acc_xy: f64,
    /// Vertical acceleration process noise, m/s².
    pub proc_sigma_acc_z: f64,
    /// Heading-acceleration process noise, rad/s².
    pub proc_sigma_psidd: f64,
    /// Low-pass cutoff for the a_z differentiator, Hz.
    pub az_lpf_cutoff_hz: f64,
    /// Low-pass cutoff for the psi_ddot differentiator, Hz.
    pub psidd_lpf_cutoff_hz: f64,
    /// Speed threshold for switching the heading measurement source, m/s.
    pub heading_speed_threshold: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            meas_sigma_pos: 1e-3,
            meas_sigma_yaw: 2e-3,
            proc_sigma_acc_xy: 2.0,
            proc_sigma_acc_z: 3.0,
            proc_sigma_psidd: 5.0,
            az_lpf_cutoff_hz: 8.0,
            psidd_lpf_cutoff_hz: 6.0,
            heading_speed_threshold: HEADING_SPEED_THRESHOLD,
        }
    }
}

pub fn wrap_to_pi(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// Six-state constant-velocity filter on [p_x, p_y, p_z, v_x, v_y, v_z].
#[derive(Debug, Clone)]
pub struct Cv6Filter {
    pub state: SVector<f64, 6>,
    pub cov: SMatrix<f64, 6, 6>,
    sigma_acc_xy: f64,
    sigma_acc_z: f64,
    sigma_meas: f64,
    pub rejected_last: bool,
}

impl Cv6Filter {
    pub fn new(cfg: &EstimatorConfig, initial_pos: [f64; 3]) -> Self {
        let mut state = SVector::<f64, 6>::zeros();
        state[0] = initial_pos[0];
        state[1] = initial_pos[1];
        state[2] = initial_pos[2];
        let mut cov = SMatrix::<f64, 6, 6>::identity() * 1e-4;
        for i in 3..6 {
            cov[(i, i)] = 1.0;
        }
        Self {
            state,
            cov,
            sigma_acc_xy: cfg.proc_sigma_acc_xy,
            sigma_acc_z: cfg.proc_sigma_acc_z,
            sigma_meas: cfg.meas_sigma_pos,
            rejected_last: false,
        }
    }

    /// Predict with the constant-velocity transition, then update with the
    /// position measurement. Non-finite measurements are rejected (predict
    /// only) and flagged.
    pub fn step(&mut self, dt: f64, meas: [f64; 3]) {
        assert!(dt > 0.0);
        // predict
        let mut f = SMatrix::<f64, 6, 6>::identity();
        for i in 0..3 {
            f[(i, i + 3)] = dt;
        }
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            let s = if i == 2 { self.sigma_acc_z } else { self.sigma_acc_xy };
            let s2 = s * s;
            q[(i, i)] = s2 * dt.powi(4) / 4.0;
            q[(i, i + 3)] = s2 * dt.powi(3) / 2.0;
            q[(i + 3, i)] = s2 * dt.powi(3) / 2.0;
            q[(i + 3, i + 3)] = s2 * dt * dt;
        }
        self.state = f * self.state;
        self.cov = f * self.cov * f.transpose() + q;

        if !meas.iter().all(|m| m.is_finite()) {
            self.rejected_last = true;
            return;
        }
        self.rejected_last = false;

        // update (position measurement), Joseph form
        let mut h = SMatrix::<f64, 3, 6>::zeros();
        for i in 0..3 {
            h[(i, i)] = 1.0;
        }
        let r = SMatrix::<f64, 3, 3>::identity() * (self.sigma_meas * self.sigma_meas).max(1e-20);
        let z = SVector::<f64, 3>::from_column_slice(&meas);
        let innov = z - h * self.state;
        let s = h * self.cov * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance invertible");
        let k = self.cov * h.transpose() * s_inv;
        self.state += k * innov;
        let ikh = SMatrix::<f64, 6, 6>::identity() - k * h;
        self.cov = ikh * self.cov * ikh.transpose() + k * r * k.transpose();
        // keep symmetric
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.state[3], self.state[4], self.state[5]]
    }

    pub fn position(&self) -> [f64; 3] {
        [self.state[0], self.state[1], self.state[2]]
    }

    /// Horizontal airspeed estimate.
    pub fn horizontal_speed(&self) -> f64 {
        (self.state[3] * self.state[3] + self.state[4] * self.state[4]).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadingSource {
    VelocityDerived,
    QuaternionDerived,
}

/// Two-state constant-heading-rate filter on [psi, psi_dot]; the internal
/// heading stays unwrapped and innovations are wrapped to (-pi, pi].
#[derive(Debug, Clone)]
pub struct HeadingFilter {
    pub state: SVector<f64, 2>,
    pub cov: SMatrix<f64, 2, 2>,
    sigma_proc: f64,
    sigma_meas: f64,
    pub mode: HeadingSource,
}

impl HeadingFilter {
    pub fn new(cfg: &EstimatorConfig, initial_psi: f64) -> Self {
        Self {
            state: SVector::<f64, 2>::new(initial_psi, 0.0),
            cov: SMatrix::<f64, 2, 2>::new(1e-3, 0.0, 0.0, 1.0),
            sigma_proc: cfg.proc_sigma_psidd,
            sigma_meas: cfg.meas_sigma_yaw.max(1e-6),
            mode: HeadingSource::QuaternionDerived,
        }
    }

    pub fn step(&mut self, dt: f64, velocity: [f64; 3], quaternion_yaw: f64, threshold: f64) {
        assert!(dt > 0.0);
        let f = SMatrix::<f64, 2, 2>::new(1.0, dt, 0.0, 1.0);
        let s2 = self.sigma_proc * self.sigma_proc;
        let q = SMatrix::<f64, 2, 2>::new(
            s2 * dt.powi(4) / 4.0,
            s2 * dt.powi(3) / 2.0,
            s2 * dt.powi(3) / 2.0,
            s2 * dt * dt,
        );
        self.state = f * self.state;
        self.cov = f * self.cov * f.transpose() + q;

        // Direct yaw is preferred: heading derived from the filtered velocity
        // vector lags the true heading on a turning vehicle, which biases the
        // rate estimate and gets amplified once the rudder loop closes.
        let speed = (velocity[0] * velocity[0] + velocity[1] * velocity[1]).sqrt();
        let (z, mode) = if quaternion_yaw.is_finite() {
            (quaternion_yaw, HeadingSource::QuaternionDerived)
        } else if speed >= threshold {
            (velocity[1].atan2(velocity[0]), HeadingSource::VelocityDerived)
        } else {
            // no usable measurement this tick; coast on the prediction
            self.mode = HeadingSource::QuaternionDerived;
            return;
        };
        self.mode = mode;

        let h = SMatrix::<f64, 1, 2>::new(1.0, 0.0);
        let r = SMatrix::<f64, 1, 1>::new((self.sigma_meas * self.sigma_meas).max(1e-20));
        let innov = wrap_to_pi(z - self.state[0]);
        let s = (h * self.cov * h.transpose() + r)[(0, 0)];
        let k = self.cov * h.transpose() / s;
        self.state += k * innov;
        let ikh = SMatrix::<f64, 2, 2>::identity() - k * h;
        self.cov = ikh * self.cov * ikh.transpose() + k * r * k.transpose();
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
    }
}

/// Low-pass-filtered finite-difference differentiator.
#[derive(Debug, Clone)]
pub struct DiffLpf {
    prev: Option<f64>,
    lpf_state: f64,
    cutoff_hz: f64,
}

impl DiffLpf {
    pub fn new(cutoff_hz: f64) -> Self {
        assert!(cutoff_hz > 0.0);
        Self { prev: None, lpf_state: 0.0, cutoff_hz }
    }

    /// Returns the filtered derivative estimate; the first call returns 0.
    pub fn step(&mut self, dt: f64, input: f64) -> f64 {
        assert!(dt > 0.0);
        let raw = match self.prev {
            Some(prev) => (input - prev) / dt,
            None => {
                self.prev = Some(input);
                return 0.0;
            }
        };
        self.prev = Some(input);
        let tau = 1.0 / (std::f64::consts::TAU * self.cutoff_hz);
        let alpha = dt / (dt + tau);
        self.lpf_state += alpha * (raw - self.lpf_state);
        self.lpf_state
    }

    pub fn output(&self) -> f64 {
        self.lpf_state
    }

    /// Seed the differentiator with a known input level and derivative so
    /// the first outputs don't ramp up from zero.
    pub fn prime(&mut self, input: f64, derivative: f64) {
        self.prev = Some(input);
        self.lpf_state = derivative;
    }
}

/// Bundles the sub-filters and assembles the nine-state estimate.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub cv6: Cv6Filter,
    pub heading: HeadingFilter,
    pub az_diff: DiffLpf,
    pub psidd_diff: DiffLpf,
    threshold: f64,
}

impl Estimator {
    pub fn new(cfg: &EstimatorConfig, initial_pos: [f64; 3], initial_psi: f64) -> Self {
        Self {
            cv6: Cv6Filter::new(cfg, initial_pos),
            heading: HeadingFilter::new(cfg, initial_psi),
            az_diff: DiffLpf::new(cfg.az_lpf_cutoff_hz),
            psidd_diff: DiffLpf::new(cfg.psidd_lpf_cutoff_hz),
            threshold: cfg.heading_speed_threshold,
        }
    }

    /// Start from a full state instead of position/yaw only, e.g. when the
    /// loop closes mid-flight and the derivative states are already known.
    pub fn with_state(cfg: &EstimatorConfig, x: &VehicleState) -> Self {
        let mut est = Self::new(cfg, x.position(), x.psi);
        let (sin_psi, cos_psi) = x.psi.sin_cos();
        est.cv6.state[3] = x.v * cos_psi;
        est.cv6.state[4] = x.v * sin_psi;
        est.cv6.state[5] = x.v_z;
        for i in 3..6 {
            est.cv6.cov[(i, i)] = 1e-4;
        }
        est.heading.state[1] = x.psi_dot;
        est.heading.cov[(1, 1)] = 1e-4;
        est.az_diff.prime(x.v_z, x.a_z);
        est.psidd_diff.prime(x.psi_dot, x.psi_ddot);
        est
    }

    /// One sensor tick: position + yaw measurement.
    pub fn step(&mut self, dt: f64, meas_pos: [f64; 3], meas_yaw: f64) {
        self.cv6.step(dt, meas_pos);
        self.heading.step(dt, self.cv6.velocity(), meas_yaw, self.threshold);
        self.az_diff.step(dt, self.cv6.state[5]);
        self.psidd_diff.step(dt, self.heading.state[1]);
    }

    pub fn assemble_state(&self) -> VehicleState {
        let p = self.cv6.position();
        VehicleState {
            p_x: p[0],
            p_y: p[1],
            p_z: p[2],
            psi: self.heading.state[0],
            v: self.cv6.horizontal_speed(),
            v_z: self.cv6.state[5],
            a_z: self.az_diff.output(),
            psi_dot: self.heading.state[1],
            psi_ddot: self.psidd_diff.output(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn cfg() -> EstimatorConfig {
        EstimatorConfig::default()
    }

    fn spd_min_eig<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
        nalgebra::DMatrix::from_fn(N, N, |i, j| m[(i, j)])
            .symmetric_eigen()
            .eigenvalues
            .min()
    }

    #[test]
    fn stationary_target_velocity_converges_to_zero() {
        let mut c = cfg();
        c.meas_sigma_pos = 1e-9;
        let mut kf = Cv6Filter::new(&c, [1.0, 2.0, 3.0]);
        kf.state[3] = 0.5; // wrong initial velocity
        for _ in 0..100 {
            kf.step(1.0 / 240.0, [1.0, 2.0, 3.0]);
        }
        for v in kf.velocity() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn constant_velocity_target_tracked() {
        let c = cfg();
        let dt = 1.0 / 240.0;
        let mut kf = Cv6Filter::new(&c, [0.0; 3]);
        let vel = [1.2, -0.7, 0.3];
        for k in 1..=50 {
            let t = k as f64 * dt;
            kf.step(dt, [vel[0] * t, vel[1] * t, vel[2] * t]);
        }
        for (est, truth) in kf.velocity().iter().zip(vel.iter()) {
            assert!((est - truth).abs() / truth.abs() < 0.01, "{est} vs {truth}");
        }
    }

    #[test]
    fn nan_measurement_rejected() {
        let c = cfg();
        let dt = 1.0 / 240.0;
        let mut kf = Cv6Filter::new(&c, [0.0; 3]);
        kf.step(dt, [0.0, 0.0, 0.0]);
        let before = kf.state;
        let cov_before = kf.cov;
        kf.step(dt, [f64::NAN, 0.0, 0.0]);
        assert!(kf.rejected_last);
        // prediction only: position advanced by velocity, covariance grew
        let f = {
            let mut f = SMatrix::<f64, 6, 6>::identity();
            for i in 0..3 {
                f[(i, i + 3)] = dt;
            }
            f
        };
        let predicted = f * before;
        assert_eq!(kf.state, predicted);
        assert!(kf.cov[(0, 0)] > cov_before[(0, 0)]);
    }

    #[test]
    fn heading_measurement_source_switches() {
        let c = cfg();
        let mut hf = HeadingFilter::new(&c, 0.0);
        hf.step(1.0 / 240.0, [1.0, 0.0, 0.0], 0.5, c.heading_speed_threshold);
        assert_eq!(hf.mode, HeadingSource::QuaternionDerived);
        // without a yaw measurement, fall back to the velocity vector
        hf.step(1.0 / 240.0, [1.0, 0.0, 0.0], f64::NAN, c.heading_speed_threshold);
        assert_eq!(hf.mode, HeadingSource::VelocityDerived);
    }

    #[test]
    fn heading_atan2_measurements() {
        let c = cfg();
        let mut c2 = c;
        c2.meas_sigma_yaw = 1e-9;
        let dt = 1.0 / 240.0;
        let mut hf = HeadingFilter::new(&c2, 0.0);
        for _ in 0..200 {
            hf.step(dt, [0.0, 2.0, 0.0], f64::NAN, c.heading_speed_threshold);
        }
        assert_abs_diff_eq!(hf.state[0], PI / 2.0, epsilon = 1e-4);
    }

    #[test]
    fn heading_continuous_across_pi_crossing() {
        let c = cfg();
        let dt = 1.0 / 240.0;
        let mut hf = HeadingFilter::new(&c, 3.0);
        let rate = 0.8;
        let mut prev = hf.state[0];
        for k in 0..2000 {
            let psi_true = 3.0 + rate * k as f64 * dt; // crosses +pi
            let v = [2.0 * psi_true.cos(), 2.0 * psi_true.sin(), 0.0];
            hf.step(dt, v, wrap_to_pi(psi_true), c.heading_speed_threshold);
            assert!((hf.state[0] - prev).abs() < 0.1, "jump at step {k}");
            prev = hf.state[0];
        }
        // unwrapped estimate should be near the unwrapped truth, not wrapped
        let final_true = 3.0 + rate * 2000.0 * dt;
        assert!((hf.state[0] - final_true).abs() < 0.05);
    }

    #[test]
    fn heading_invariant_to_yaw_offset_of_two_pi() {
        let c = cfg();
        let dt = 1.0 / 240.0;
        let run = |offset: f64| {
            let mut hf = HeadingFilter::new(&c, 0.2);
            for k in 0..500 {
                let psi = 0.2 + 0.01 * (k as f64 * dt).sin();
                hf.step(dt, [0.1, 0.0, 0.0], psi + offset, c.heading_speed_threshold);
            }
            hf.state[0]
        };
        let a = run(0.0);
        let b = run(std::f64::consts::TAU);
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn diff_lpf_constant_input_zero() {
        let mut d = DiffLpf::new(8.0);
        let dt = 1.0 / 240.0;
        assert_eq!(d.step(dt, 5.0), 0.0); // first call
        for _ in 0..200 {
            d.step(dt, 5.0);
        }
        assert_abs_diff_eq!(d.output(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn diff_lpf_ramp_recovers_slope() {
        let mut d = DiffLpf::new(8.0);
        let dt = 1.0 / 240.0;
        let tau = 1.0 / (std::f64::consts::TAU * 8.0);
        let steps = (12.0 * tau / dt).ceil() as usize + 1;
        for k in 0..steps {
            d.step(dt, 2.0 * k as f64 * dt);
        }
        assert!((d.output() - 2.0).abs() / 2.0 < 0.01, "slope {}", d.output());
    }

    #[test]
    fn diff_lpf_sinusoid_attenuation_matches_transfer_function() {
        let cutoff = 10.0;
        let freq = 1.0;
        let mut d = DiffLpf::new(cutoff);
        let dt = 1.0 / 2400.0; // fine step to isolate the analog response
        let mut max_out: f64 = 0.0;
        let steps = (4.0 / dt) as usize;
        for k in 0..steps {
            let t = k as f64 * dt;
            let out = d.step(dt, (std::f64::consts::TAU * freq * t).sin());
            if t > 2.0 {
                max_out = max_out.max(out.abs());
            }
        }
        // derivative amplitude 2*pi*f, scaled by |H| of the first-order LPF
        let w = std::f64::consts::TAU * freq;
        let wc = std::f64::consts::TAU * cutoff;
        let expected = w / (1.0 + (w / wc).powi(2)).sqrt();
        assert!((max_out - expected).abs() / expected < 0.02, "{max_out} vs {expected}");
    }

    #[test]
    fn assemble_zero_state() {
        let c = cfg();
        let est = Estimator::new(&c, [0.0; 3], 0.0);
        let s = est.assemble_state();
        assert_eq!(s, VehicleState::default());
    }

    #[test]
    fn covariances_stay_spd_under_random_steps() {
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut kf = Cv6Filter::new(&c, [0.0; 3]);
        let mut hf = HeadingFilter::new(&c, 0.0);
        let dt = 1.0 / 240.0;
        for k in 0..100_000 {
            let pos = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0)];
            kf.step(dt, pos);
            let vel = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0];
            hf.step(dt, vel, rng.gen_range(-PI..PI), c.heading_speed_threshold);
            if k % 10_000 == 0 {
                assert!(spd_min_eig(&kf.cov) > 0.0, "cv6 cov lost SPD at step {k}");
                assert!(spd_min_eig(&hf.cov) > 0.0, "heading cov lost SPD at step {k}");
            }
        }
        assert!(spd_min_eig(&kf.cov) > 0.0);
        assert!(spd_min_eig(&hf.cov) > 0.0);
    }
}
