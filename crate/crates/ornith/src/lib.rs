//! Flight-control stack and closed-loop simulator for a bird-scale
//! flapping-wing vehicle: nine-state cycle-averaged dynamics, a Model
//! Predictive Contouring Controller over arc-length-parameterized reference
//! trajectories, an offline gate-trajectory optimizer, a sequential
//! parameter-identification pipeline, and a simulation harness.

pub mod config;
pub mod estimator;
pub mod flightlog;
pub mod gateplan;
pub mod ident;
pub mod model;
pub mod mpcc;
pub mod presets;
pub mod refpath;
pub mod sim;
pub mod solver;
pub mod stats;
