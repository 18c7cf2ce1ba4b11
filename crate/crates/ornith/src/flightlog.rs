//! Flight-log records and CSV round-tripping.
//!
//! One row per control tick: true plant state, estimator output, applied
//! command, progress variable, battery, and solver diagnostics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::VehicleState;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("bad header: expected `{expected}`, got `{got}`")]
    BadHeader { expected: String, got: String },
    #[error("row {row}: expected {expected} fields, got {got}")]
    BadRow { row: usize, expected: usize, got: usize },
    #[error("row {row}: unparsable number `{text}`")]
    BadNumber { row: usize, text: String },
}

pub const LOG_HEADER: &str = "t,px,py,pz,psi,v,vz,az,psid,psidd,\
est_px,est_py,est_pz,est_psi,est_v,est_vz,est_az,est_psid,est_psidd,\
u_flap,u_rud,theta,batt,solve_ms,iters,converged";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub truth: VehicleState,
    pub estimate: VehicleState,
    pub u_flap: f64,
    pub u_rud: f64,
    pub theta: f64,
    pub battery_pct: f64,
    pub solve_ms: f64,
    pub iters: u32,
    pub converged: bool,
}

fn push_state(out: &mut String, s: &VehicleState) {
    for v in s.to_array() {
        out.push_str(&format!("{v},"));
    }
}

pub fn to_csv(records: &[LogRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 200 + LOG_HEADER.len());
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},", r.t));
        push_state(&mut out, &r.truth);
        push_state(&mut out, &r.estimate);
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.u_flap,
            r.u_rud,
            r.theta,
            r.battery_pct,
            r.solve_ms,
            r.iters,
            r.converged as u8
        ));
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<LogRecord>, LogError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != LOG_HEADER {
        return Err(LogError::BadHeader { expected: LOG_HEADER.to_string(), got: header.to_string() });
    }
    let mut records = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 26 {
            return Err(LogError::BadRow { row, expected: 26, got: fields.len() });
        }
        let num = |i: usize| -> Result<f64, LogError> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| LogError::BadNumber { row, text: fields[i].to_string() })
        };
        let mut truth = [0.0; 9];
        let mut est = [0.0; 9];
        for k in 0..9 {
            truth[k] = num(1 + k)?;
            est[k] = num(10 + k)?;
        }
        records.push(LogRecord {
            t: num(0)?,
            truth: VehicleState::from_array(truth),
            estimate: VehicleState::from_array(est),
            u_flap: num(19)?,
            u_rud: num(20)?,
            theta: num(21)?,
            battery_pct: num(22)?,
            solve_ms: num(23)?,
            iters: num(24)? as u32,
            converged: num(25)? != 0.0,
        });
    }
    Ok(records)
}

/// Copy of a serialized log with solver wall-clock columns zeroed, for
/// comparing repeated runs byte-for-byte.
pub fn mask_timing(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len());
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').collect();
        if fields.len() == 26 {
            fields[23] = "0";
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
