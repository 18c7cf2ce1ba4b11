//! Built-in reference trajectories and gate layouts.

use crate::gateplan::Gate;
use crate::refpath::{build_reference, ArcLengthSpline, PathError, WaypointPath, DEFAULT_SPACING};

/// Horizontal circle, radius 1.5 m at 1.5 m altitude.
pub fn circle_waypoints() -> WaypointPath {
    circle_waypoints_at(1.5, 1.5)
}

pub fn circle_waypoints_at(radius: f64, altitude: f64) -> WaypointPath {
    let n = ((std::f64::consts::TAU * radius) / DEFAULT_SPACING).round() as usize;
    let points = (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            [radius * a.cos(), radius * a.sin(), altitude]
        })
        .collect();
    WaypointPath::new(points, true)
}

pub fn circle_spline() -> Result<ArcLengthSpline, PathError> {
    build_reference(&circle_waypoints(), DEFAULT_SPACING)
}

fn ring_gates(radius: f64, altitudes: [f64; 3], phase: f64) -> Vec<Gate> {
    (0..3)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / 3.0;
            Gate {
                position: [radius * a.cos(), radius * a.sin(), altitudes[i]],
                normal: [-a.sin(), a.cos(), 0.0],
            }
        })
        .collect()
}

/// Three gates on a 2.5 m ring with altitude variation between 0.45 m and
/// 1.2 m.
pub fn track1_gates() -> Vec<Gate> {
    ring_gates(2.5, [0.45, 1.2, 0.75], 0.0)
}

/// Tighter ring with the full 0.3–1.25 m altitude span.
pub fn track2_gates() -> Vec<Gate> {
    ring_gates(2.3, [0.3, 1.25, 0.6], std::f64::consts::FRAC_PI_6)
}
