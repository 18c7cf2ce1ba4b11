//! Nine-state cycle-averaged ornithopter dynamics.
//!
//! The state vector is `[p_x, p_y, p_z, psi, v, v_z, a_z, psi_dot, psi_ddot]`.
//! Forward speed saturates against a terminal speed, flapping effort couples
//! into climb through a second-order vertical response, and heading is a
//! third-order chain driven by a speed-dependent rudder gain. The same
//! derivative serves both the plant (hard thrust saturation, RK4) and the
//! controller prediction model (softplus saturation, Euler).

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 9;

/// Sharpness of the softplus surrogate used in the controller-side dynamics.
/// Keeps the surrogate within 0.014 of the hard max.
pub const SOFTPLUS_BETA: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("battery percentage {0} outside [0, 100]")]
    BatteryOutOfRange(f64),
    #[error("invalid model parameter: {0}")]
    InvalidParam(String),
    #[error("control input out of bounds: u_flap={u_flap}, u_rud={u_rud}")]
    ControlOutOfBounds { u_flap: f64, u_rud: f64 },
    #[error("parameter file error: {0}")]
    ParamFile(String),
}

/// Identified dynamical model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct ModelParams {
    /// Thrust gain, m/s².
    pub k_t: f64,
    /// Drag coefficient, 1/s.
    pub k_d: f64,
    /// Terminal speed, m/s.
    pub v_max: f64,
    /// Climb-rate gain, m/s.
    pub k_z: f64,
    /// Turn–altitude coupling, m·s/rad².
    pub k_psi_z: f64,
    /// Vertical natural frequency, rad/s.
    pub omega_n: f64,
    /// Vertical damping ratio.
    pub zeta: f64,
    /// Nominal level-flight flap fraction.
    pub u_level_nominal: f64,
    /// Battery–flap slope, 1/%.
    pub a_batt: f64,
    /// Battery–flap intercept.
    pub c_batt: f64,
    /// Rudder–heading gain, rad/(s²·m).
    pub k_hdg: f64,
    /// Heading-acceleration time constant, s.
    pub tau_psidd: f64,
    /// Rudder trim.
    pub u_rud_trim: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            k_t: 4.07,
            k_d: 0.227,
            v_max: 2.96,
            k_z: 1.6,
            k_psi_z: 0.075,
            omega_n: 4.5,
            zeta: 0.25,
            u_level_nominal: 0.70,
            a_batt: -5.49e-3,
            c_batt: 1.021,
            k_hdg: -17.0,
            tau_psidd: 0.15,
            u_rud_trim: 0.075,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("k_t", self.k_t),
            ("k_d", self.k_d),
            ("v_max", self.v_max),
            ("k_z", self.k_z),
            ("omega_n", self.omega_n),
            ("zeta", self.zeta),
            ("tau_psidd", self.tau_psidd),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(ModelError::InvalidParam(format!("{name} must be > 0, got {value}")));
            }
        }
        if self.k_psi_z < 0.0 {
            return Err(ModelError::InvalidParam(format!(
                "k_psi_z must be >= 0, got {}",
                self.k_psi_z
            )));
        }
        if !(0.0..=1.0).contains(&self.u_level_nominal) {
            return Err(ModelError::InvalidParam(format!(
                "u_level_nominal must be in [0,1], got {}",
                self.u_level_nominal
            )));
        }
        if !(-1.0..=1.0).contains(&self.u_rud_trim) {
            return Err(ModelError::InvalidParam(format!(
                "u_rud_trim must be in [-1,1], got {}",
                self.u_rud_trim
            )));
        }
        Ok(())
    }

    /// Serialize to a flat `key = value` file.
    pub fn to_config_string(&self) -> String {
        toml::to_string(self).expect("ModelParams serializes")
    }

    pub fn from_config_str(s: &str) -> Result<Self, ModelError> {
        let p: ModelParams = toml::from_str(s).map_err(|e| ModelError::ParamFile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// The nine-state vector. Heading `psi` is stored unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
    pub psi: f64,
    pub v: f64,
    pub v_z: f64,
    pub a_z: f64,
    pub psi_dot: f64,
    pub psi_ddot: f64,
}

impl VehicleState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.p_x, self.p_y, self.p_z, self.psi, self.v, self.v_z, self.a_z, self.psi_dot,
            self.psi_ddot,
        ]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self {
            p_x: a[0],
            p_y: a[1],
            p_z: a[2],
            psi: a[3],
            v: a[4],
            v_z: a[5],
            a_z: a[6],
            psi_dot: a[7],
            psi_ddot: a[8],
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.p_x, self.p_y, self.p_z]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Normalized flapping intensity and rudder deflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub u_flap: f64,
    pub u_rud: f64,
}

impl ControlInput {
    pub fn clamped(u_flap: f64, u_rud: f64) -> Self {
        Self { u_flap: u_flap.clamp(0.0, 1.0), u_rud: u_rud.clamp(-1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if (0.0..=1.0).contains(&self.u_flap) && (-1.0..=1.0).contains(&self.u_rud) {
            Ok(())
        } else {
            Err(ModelError::ControlOutOfBounds { u_flap: self.u_flap, u_rud: self.u_rud })
        }
    }
}

/// Battery-adapted level-flight flap fraction, clamped to [0, 1].
pub fn level_flap(params: &ModelParams, battery_pct: f64) -> Result<f64, ModelError> {
    if !(0.0..=100.0).contains(&battery_pct) {
        return Err(ModelError::BatteryOutOfRange(battery_pct));
    }
    Ok((params.a_batt * battery_pct + params.c_batt).clamp(0.0, 1.0))
}

/// softplus(beta*s)/beta, the C¹ surrogate for max(0, s).
pub fn softplus_sat(s: f64) -> f64 {
    let z = SOFTPLUS_BETA * s;
    // ln(1+e^z)/beta, stable for large |z|
    if z > 30.0 {
        s
    } else if z < -30.0 {
        0.0
    } else {
        z.exp().ln_1p() / SOFTPLUS_BETA
    }
}

/// d/ds of `softplus_sat`, the logistic sigmoid.
pub fn softplus_sat_d(s: f64) -> f64 {
    let z = SOFTPLUS_BETA * s;
    if z > 30.0 {
        1.0
    } else if z < -30.0 {
        0.0
    } else {
        1.0 / (1.0 + (-z).exp())
    }
}

/// Controller-model variants for the ablation study. The plant always runs
/// the full model; these only change the prediction dynamics inside the NLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    Full,
    /// (i) heading command uses a frozen nominal airspeed.
    FixedSpeedTurning,
    /// (ii) turn-induced altitude coupling removed.
    NoTurnAltCoupling,
    /// (iii) a_z state removed; the vertical response collapses to first order.
    SecondOrderVertical,
    /// (iv) psi_ddot state removed; rudder drives psi_dot directly.
    SecondOrderHeading,
}

impl AblationMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "i" | "fixed-speed-turning" => Some(Self::FixedSpeedTurning),
            "ii" | "no-turn-alt-coupling" => Some(Self::NoTurnAltCoupling),
            "iii" | "second-order-vertical" => Some(Self::SecondOrderVertical),
            "iv" | "second-order-heading" => Some(Self::SecondOrderHeading),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::FixedSpeedTurning => "i",
            Self::NoTurnAltCoupling => "ii",
            Self::SecondOrderVertical => "iii",
            Self::SecondOrderHeading => "iv",
        }
    }
}

/// Prediction model used inside the MPCC rollout: softplus thrust saturation
/// plus an optional ablation, with `u_level` frozen per solve.
#[derive(Debug, Clone, Copy)]
pub struct ControllerModel {
    pub params: ModelParams,
    pub mode: AblationMode,
    /// Frozen airspeed for `AblationMode::FixedSpeedTurning`.
    pub v_bar: f64,
}

impl ControllerModel {
    pub fn full(params: ModelParams) -> Self {
        Self { params, mode: AblationMode::Full, v_bar: 0.0 }
    }

    /// Turn–altitude coupling constant as seen by this variant's prediction.
    pub fn effective_k_psi_z(&self) -> f64 {
        match self.mode {
            AblationMode::NoTurnAltCoupling => 0.0,
            _ => self.params.k_psi_z,
        }
    }

    /// Controller-side state rate with the softplus thrust surrogate.
    pub fn derivative(&self, x: &VehicleState, u: &ControlInput, u_level: f64) -> [f64; STATE_DIM] {
        let p = &self.params;
        let thrust_sat = softplus_sat(1.0 - x.v / p.v_max);
        let v_dot = p.k_t * u.u_flap * thrust_sat - p.k_d * x.v;

        let k_psi_z = match self.mode {
            AblationMode::NoTurnAltCoupling => 0.0,
            _ => p.k_psi_z,
        };
        let vz_target = p.k_z * (u.u_flap - u_level);

        let (vz_dot, az_dot) = match self.mode {
            AblationMode::SecondOrderVertical => {
                // quasi-steady collapse of the a_z state
                let az_eff = (p.omega_n / (2.0 * p.zeta)) * (vz_target - x.v_z);
                (az_eff - k_psi_z * x.psi_dot * x.psi_dot, 0.0)
            }
            _ => (
                x.a_z - k_psi_z * x.psi_dot * x.psi_dot,
                p.omega_n * p.omega_n * (vz_target - x.v_z) - 2.0 * p.zeta * p.omega_n * x.a_z,
            ),
        };

        let v_for_hdg = match self.mode {
            AblationMode::FixedSpeedTurning => self.v_bar,
            _ => x.v,
        };
        let psidd_cmd = p.k_hdg * (u.u_rud + p.u_rud_trim) * v_for_hdg;
        let (psid_dot, psidd_dot) = match self.mode {
            AblationMode::SecondOrderHeading => (psidd_cmd, 0.0),
            _ => (x.psi_ddot, (psidd_cmd - x.psi_ddot) / p.tau_psidd),
        };

        [
            x.v * x.psi.cos(),
            x.v * x.psi.sin(),
            x.v_z,
            x.psi_dot,
            v_dot,
            vz_dot,
            az_dot,
            psid_dot,
            psidd_dot,
        ]
    }

    /// Jacobians of the discrete-step rate w.r.t. state (A, 9×9) and control
    /// (B, 9×2), such that `I + dt*A` is the exact Jacobian of
    /// `predict_step`. `dt` enters through the midpoint heading used by the
    /// position update.
    pub fn jacobians(
        &self,
        x: &VehicleState,
        u: &ControlInput,
        _u_level: f64,
        dt: f64,
    ) -> ([[f64; STATE_DIM]; STATE_DIM], [[f64; 2]; STATE_DIM]) {
        let p = &self.params;
        let mut a = [[0.0; STATE_DIM]; STATE_DIM];
        let mut b = [[0.0; 2]; STATE_DIM];

        let (sin_mid, cos_mid) = (x.psi + 0.5 * dt * x.psi_dot).sin_cos();
        a[0][3] = -x.v * sin_mid;
        a[0][4] = cos_mid;
        a[0][7] = -0.5 * dt * x.v * sin_mid;
        a[1][3] = x.v * cos_mid;
        a[1][4] = sin_mid;
        a[1][7] = 0.5 * dt * x.v * cos_mid;
        a[2][5] = 1.0;
        a[3][7] = 1.0;

        let sat = softplus_sat(1.0 - x.v / p.v_max);
        let sat_d = softplus_sat_d(1.0 - x.v / p.v_max);
        a[4][4] = -p.k_t * u.u_flap * sat_d / p.v_max - p.k_d;
        b[4][0] = p.k_t * sat;

        let k_psi_z = match self.mode {
            AblationMode::NoTurnAltCoupling => 0.0,
            _ => p.k_psi_z,
        };
        match self.mode {
            AblationMode::SecondOrderVertical => {
                let gain = p.omega_n / (2.0 * p.zeta);
                a[5][5] = -gain;
                a[5][7] = -2.0 * k_psi_z * x.psi_dot;
                b[5][0] = gain * p.k_z;
            }
            _ => {
                a[5][6] = 1.0;
                a[5][7] = -2.0 * k_psi_z * x.psi_dot;
                a[6][5] = -p.omega_n * p.omega_n;
                a[6][6] = -2.0 * p.zeta * p.omega_n;
                b[6][0] = p.omega_n * p.omega_n * p.k_z;
            }
        }

        match self.mode {
            AblationMode::SecondOrderHeading => {
                // psid_dot = k_hdg (u_rud + trim) v_hdg
                match self.mode_speed() {
                    Some(v_bar) => {
                        b[7][1] = p.k_hdg * v_bar;
                    }
                    None => {
                        a[7][4] = p.k_hdg * (u.u_rud + p.u_rud_trim);
                        b[7][1] = p.k_hdg * x.v;
                    }
                }
            }
            _ => {
                a[7][8] = 1.0;
                match self.mode_speed() {
                    Some(v_bar) => {
                        b[8][1] = p.k_hdg * v_bar / p.tau_psidd;
                    }
                    None => {
                        a[8][4] = p.k_hdg * (u.u_rud + p.u_rud_trim) / p.tau_psidd;
                        b[8][1] = p.k_hdg * x.v / p.tau_psidd;
                    }
                }
                a[8][8] = -1.0 / p.tau_psidd;
            }
        }

        (a, b)
    }

    fn mode_speed(&self) -> Option<f64> {
        match self.mode {
            AblationMode::FixedSpeedTurning => Some(self.v_bar),
            _ => None,
        }
    }

    /// Controller-side discrete step used by the NLP transcription: forward
    /// Euler on the dynamic states, with the position advanced along the
    /// midpoint heading. Plain Euler walks the chord of the current heading
    /// and systematically overshoots turn radii at this step size; the
    /// midpoint heading removes that bias for near-constant turn rates.
    pub fn predict_step(
        &self,
        x: &VehicleState,
        u: &ControlInput,
        u_level: f64,
        dt: f64,
    ) -> VehicleState {
        let dx = self.derivative(x, u, u_level);
        let mut out = x.to_array();
        for i in 0..STATE_DIM {
            out[i] += dt * dx[i];
        }
        let (sin_mid, cos_mid) = (x.psi + 0.5 * dt * x.psi_dot).sin_cos();
        out[0] = x.p_x + dt * x.v * cos_mid;
        out[1] = x.p_y + dt * x.v * sin_mid;
        VehicleState::from_array(out)
    }
}

/// Exact (hard-max) state rate used by the plant and identification paths.
pub fn derivative(
    x: &VehicleState,
    u: &ControlInput,
    p: &ModelParams,
    battery_pct: f64,
) -> Result<[f64; STATE_DIM], ModelError> {
    u.validate()?;
    let u_level = level_flap(p, battery_pct)?;
    Ok(derivative_with_level(x, u, p, u_level))
}

pub fn derivative_with_level(
    x: &VehicleState,
    u: &ControlInput,
    p: &ModelParams,
    u_level: f64,
) -> [f64; STATE_DIM] {
    let thrust_sat = (1.0 - x.v / p.v_max).max(0.0);
    let v_dot = p.k_t * u.u_flap * thrust_sat - p.k_d * x.v;
    let vz_target = p.k_z * (u.u_flap - u_level);
    let psidd_cmd = p.k_hdg * (u.u_rud + p.u_rud_trim) * x.v;
    [
        x.v * x.psi.cos(),
        x.v * x.psi.sin(),
        x.v_z,
        x.psi_dot,
        v_dot,
        x.a_z - p.k_psi_z * x.psi_dot * x.psi_dot,
        p.omega_n * p.omega_n * (vz_target - x.v_z) - 2.0 * p.zeta * p.omega_n * x.a_z,
        x.psi_ddot,
        (psidd_cmd - x.psi_ddot) / p.tau_psidd,
    ]
}

fn clamp_speed(mut x: VehicleState) -> VehicleState {
    if x.v < 0.0 {
        x.v = 0.0;
    }
    x
}

/// Forward Euler step; v clamped to >= 0 afterward.
pub fn euler_step(
    x: &VehicleState,
    u: &ControlInput,
    p: &ModelParams,
    battery_pct: f64,
    dt: f64,
) -> Result<VehicleState, ModelError> {
    assert!(dt > 0.0, "dt must be positive");
    let dx = derivative(x, u, p, battery_pct)?;
    let mut out = x.to_array();
    for i in 0..STATE_DIM {
        out[i] += dt * dx[i];
    }
    Ok(clamp_speed(VehicleState::from_array(out)))
}

/// Classical RK4 step for the plant; same clamping as `euler_step`.
pub fn plant_step(
    x: &VehicleState,
    u: &ControlInput,
    p: &ModelParams,
    battery_pct: f64,
    dt: f64,
) -> Result<VehicleState, ModelError> {
    assert!(dt > 0.0, "dt must be positive");
    u.validate()?;
    let u_level = level_flap(p, battery_pct)?;
    let xa = x.to_array();
    let k1 = derivative_with_level(x, u, p, u_level);
    let mid = |k: &[f64; STATE_DIM], h: f64| {
        let mut y = xa;
        for i in 0..STATE_DIM {
            y[i] += h * k[i];
        }
        VehicleState::from_array(y)
    };
    let k2 = derivative_with_level(&mid(&k1, dt / 2.0), u, p, u_level);
    let k3 = derivative_with_level(&mid(&k2, dt / 2.0), u, p, u_level);
    let k4 = derivative_with_level(&mid(&k3, dt), u, p, u_level);
    let mut out = xa;
    for i in 0..STATE_DIM {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(clamp_speed(VehicleState::from_array(out)))
}

/// Speed at which `v_dot` vanishes for a given flap fraction.
pub fn steady_state_speed(u_flap: f64, p: &ModelParams) -> f64 {
    let num = p.k_t * u_flap * p.v_max;
    let den = p.k_t * u_flap + p.k_d * p.v_max;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn params() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn level_flap_matches_calibration() {
        let p = params();
        assert_abs_diff_eq!(level_flap(&p, 58.47).unwrap(), 0.700, epsilon = 1e-3);
        assert_abs_diff_eq!(level_flap(&p, 100.0).unwrap(), 0.472, epsilon = 1e-3);
        assert_eq!(level_flap(&p, 0.0).unwrap(), 1.0); // clamped from 1.021
        assert!(level_flap(&p, 101.0).is_err());
        assert!(level_flap(&p, -0.1).is_err());
    }

    #[test]
    fn derivative_thrust_at_rest() {
        let p = params();
        let x = VehicleState::default();
        let u = ControlInput { u_flap: 1.0, u_rud: -p.u_rud_trim };
        let dx = derivative(&x, &u, &p, 90.0).unwrap();
        assert_abs_diff_eq!(dx[4], 4.07, epsilon = 1e-12);
    }

    #[test]
    fn derivative_at_terminal_speed() {
        let p = params();
        let x = VehicleState { v: p.v_max, ..Default::default() };
        let u = ControlInput { u_flap: 1.0, u_rud: 0.0 };
        let dx = derivative(&x, &u, &p, 90.0).unwrap();
        assert_relative_eq!(dx[4], -p.k_d * p.v_max, epsilon = 1e-12);
        assert_abs_diff_eq!(dx[4], -0.672, epsilon = 1e-3);
    }

    #[test]
    fn trim_cancels_heading_command() {
        let p = params();
        for v in [0.0, 1.0, 2.5] {
            let x = VehicleState { v, ..Default::default() };
            let u = ControlInput { u_flap: 0.5, u_rud: -p.u_rud_trim };
            let dx = derivative(&x, &u, &p, 90.0).unwrap();
            assert_abs_diff_eq!(dx[8], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn turn_altitude_coupling() {
        let p = params();
        let x = VehicleState { psi_dot: 1.0, ..Default::default() };
        let u = ControlInput { u_flap: 0.5, u_rud: 0.0 };
        let dx = derivative(&x, &u, &p, 90.0).unwrap();
        assert_abs_diff_eq!(dx[5], -0.075, epsilon = 1e-12);
    }

    #[test]
    fn euler_fixed_point() {
        let p = params();
        let b = 58.47; // level_flap -> 0.700
        let u_level = level_flap(&p, b).unwrap();
        let v_ss = steady_state_speed(u_level, &p);
        let x = VehicleState { v: v_ss, ..Default::default() };
        let u = ControlInput { u_flap: u_level, u_rud: -p.u_rud_trim };
        let x1 = euler_step(&x, &u, &p, b, 0.05).unwrap();
        // only p_x, p_y advance
        assert_abs_diff_eq!(x1.p_x, v_ss * 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(x1.p_z, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x1.v, v_ss, epsilon = 1e-10);
        assert_abs_diff_eq!(x1.v_z, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(x1.psi_dot, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn euler_single_step_thrust() {
        let p = params();
        let x = VehicleState::default();
        let u = ControlInput { u_flap: 1.0, u_rud: -p.u_rud_trim };
        let x1 = euler_step(&x, &u, &p, 90.0, 0.1).unwrap();
        assert_abs_diff_eq!(x1.v, 0.407, epsilon = 1e-12);
    }

    #[test]
    fn plant_step_matches_euler_for_constant_derivative() {
        // v_z constant when a_z dynamics are frozen at equilibrium: use a pure
        // kinematic state (v = v_ss so v_dot = 0, straight flight).
        let p = params();
        let b = 58.47;
        let u_level = level_flap(&p, b).unwrap();
        let v_ss = steady_state_speed(u_level, &p);
        let x = VehicleState { v: v_ss, psi: 0.3, ..Default::default() };
        let u = ControlInput { u_flap: u_level, u_rud: -p.u_rud_trim };
        let dt = 0.02;
        let e = euler_step(&x, &u, &p, b, dt).unwrap();
        let r = plant_step(&x, &u, &p, b, dt).unwrap();
        for (a, b) in e.to_array().iter().zip(r.to_array().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn plant_step_convergence_under_step_halving() {
        // circle-turn scenario over 1 s, dt=0.001 vs dt=0.01
        let p = params();
        let b = 80.0;
        let u = ControlInput { u_flap: 0.8, u_rud: -0.2 };
        let run = |dt: f64| {
            let mut x = VehicleState { v: 2.0, ..Default::default() };
            let steps = (1.0 / dt).round() as usize;
            for _ in 0..steps {
                x = plant_step(&x, &u, &p, b, dt).unwrap();
            }
            x
        };
        let fine = run(0.001);
        let coarse = run(0.01);
        for (a, b) in fine.to_array().iter().zip(coarse.to_array().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn steady_state_speed_values() {
        let p = params();
        assert_eq!(steady_state_speed(0.0, &p), 0.0);
        assert_abs_diff_eq!(steady_state_speed(1.0, &p), 2.54, epsilon = 5e-3);
        let v_ss = steady_state_speed(0.7, &p);
        let x = VehicleState { v: v_ss, ..Default::default() };
        let u = ControlInput { u_flap: 0.7, u_rud: 0.0 };
        let u_level = 0.7;
        let dx = derivative_with_level(&x, &u, &p, u_level);
        assert_abs_diff_eq!(dx[4], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn steady_state_speed_monotone_and_bounded() {
        let p = params();
        let bound = p.v_max * p.k_t / (p.k_t + p.k_d * p.v_max);
        let mut prev = -1.0;
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            let v = steady_state_speed(u, &p);
            assert!(v >= prev);
            assert!(v <= bound + 1e-12);
            prev = v;
        }
        assert!(bound < p.v_max);
    }

    #[test]
    fn derivative_matches_finite_difference_of_euler() {
        let p = params();
        let b = 75.0;
        let x = VehicleState {
            p_x: 1.0,
            p_y: -2.0,
            p_z: 1.5,
            psi: 0.7,
            v: 1.8,
            v_z: 0.2,
            a_z: -0.1,
            psi_dot: 0.5,
            psi_ddot: 0.3,
        };
        let u = ControlInput { u_flap: 0.6, u_rud: 0.1 };
        let dx = derivative(&x, &u, &p, b).unwrap();
        let h = 1e-6;
        let xp = euler_step(&x, &u, &p, b, h).unwrap();
        for i in 0..STATE_DIM {
            let fd = (xp.to_array()[i] - x.to_array()[i]) / h;
            let scale = dx[i].abs().max(1.0);
            assert!((fd - dx[i]).abs() / scale < 1e-6, "component {i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn vertical_equilibrium_at_level_flap() {
        let p = params();
        let b = 70.0;
        let u_level = level_flap(&p, b).unwrap();
        let x = VehicleState { v: 2.0, v_z: 0.0, a_z: 0.0, ..Default::default() };
        let u = ControlInput { u_flap: u_level, u_rud: 0.0 };
        let dx = derivative(&x, &u, &p, b).unwrap();
        assert_abs_diff_eq!(dx[5], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dx[6], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn heading_chain_time_constant() {
        // step in psi_ddot_cmd reaches 63.2% +/- 1% of final value at t = tau
        let p = params();
        let v = 2.0;
        let u = ControlInput { u_flap: 0.5, u_rud: 0.2 };
        let cmd = p.k_hdg * (u.u_rud + p.u_rud_trim) * v;
        let dt = 1e-4;
        let mut psidd = 0.0;
        let steps = (p.tau_psidd / dt).round() as usize;
        for _ in 0..steps {
            psidd += dt * (cmd - psidd) / p.tau_psidd;
        }
        let frac = psidd / cmd;
        assert!((frac - 0.632).abs() < 0.01, "frac = {frac}");
    }

    #[test]
    fn softplus_close_to_hard_max() {
        for s in [-0.5, -0.01, 0.0, 0.01, 0.3, 1.0] {
            assert!((softplus_sat(s) - s.max(0.0)).abs() <= 0.014);
        }
    }

    #[test]
    fn controller_jacobians_match_finite_differences() {
        let p = params();
        for mode in [
            AblationMode::Full,
            AblationMode::FixedSpeedTurning,
            AblationMode::NoTurnAltCoupling,
            AblationMode::SecondOrderVertical,
            AblationMode::SecondOrderHeading,
        ] {
            let m = ControllerModel { params: p, mode, v_bar: 2.1 };
            let x = VehicleState {
                p_x: 0.3,
                p_y: -1.2,
                p_z: 1.1,
                psi: 1.9,
                v: 1.4,
                v_z: -0.3,
                a_z: 0.25,
                psi_dot: 0.8,
                psi_ddot: -0.4,
            };
            let u = ControlInput { u_flap: 0.55, u_rud: -0.2 };
            let u_level = 0.62;
            let dt = 0.1;
            let (a, b) = m.jacobians(&x, &u, u_level, dt);
            let h = 1e-7;
            // I + dt*A must be the exact Jacobian of the discrete step
            for j in 0..STATE_DIM {
                let mut xa = x.to_array();
                xa[j] += h;
                let fp = m.predict_step(&VehicleState::from_array(xa), &u, u_level, dt);
                xa[j] -= 2.0 * h;
                let fm = m.predict_step(&VehicleState::from_array(xa), &u, u_level, dt);
                let (fp, fm) = (fp.to_array(), fm.to_array());
                for i in 0..STATE_DIM {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let expect = if i == j { 1.0 + dt * a[i][j] } else { dt * a[i][j] };
                    assert!(
                        (fd - expect).abs() < 1e-5,
                        "mode {mode:?} A[{i}][{j}]: fd {fd} vs {expect}",
                    );
                }
            }
            for j in 0..2 {
                let mut up = u;
                let mut um = u;
                match j {
                    0 => {
                        up.u_flap += h;
                        um.u_flap -= h;
                    }
                    _ => {
                        up.u_rud += h;
                        um.u_rud -= h;
                    }
                }
                let fp = m.predict_step(&x, &up, u_level, dt).to_array();
                let fm = m.predict_step(&x, &um, u_level, dt).to_array();
                for i in 0..STATE_DIM {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!(
                        (fd - dt * b[i][j]).abs() < 1e-5,
                        "mode {mode:?} B[{i}][{j}]: fd {fd} vs {}",
                        dt * b[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn params_roundtrip_config() {
        let p = params();
        let s = p.to_config_string();
        let q = ModelParams::from_config_str(&s).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn default_params_reproduce_identified_values() {
        let p = params();
        assert_eq!(p.k_t, 4.07);
        assert_eq!(p.k_d, 0.227);
        assert_eq!(p.v_max, 2.96);
        assert_eq!(p.k_z, 1.6);
        assert_eq!(p.k_psi_z, 0.075);
        assert_eq!(p.omega_n, 4.5);
        assert_eq!(p.zeta, 0.25);
        assert_eq!(p.u_level_nominal, 0.70);
        assert_eq!(p.a_batt, -5.49e-3);
        assert_eq!(p.c_batt, 1.021);
        assert_eq!(p.k_hdg, -17.0);
        assert_eq!(p.tau_psidd, 0.15);
        assert_eq!(p.u_rud_trim, 0.075);
    }
}
