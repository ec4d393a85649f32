//! Real-time full-body motion reconstruction from six inertial measurement
//! units, with simultaneous terrain height-map generation.
//!
//! The estimator is an autoregressive Transformer decoder conditioned on the
//! IMU stream. Drift is stabilized by predicted stationary body points (SBPs):
//! persisting SBPs anchor the horizontal root velocity, SBP pairs drive a
//! soft two-bone IK correction of the prediction history, and foot/pelvis
//! SBPs feed an online Voronoi height map that corrects vertical root motion.

pub mod eval;
pub mod imu;
pub mod io;
pub mod kinematics;
pub mod model;
pub mod pipeline;
pub mod sbp;
pub mod synth;
pub mod terrain;

/// Capture frame rate in Hz. All streams in this crate run at 60 fps.
pub const FPS: f64 = 60.0;

/// Frame period in seconds.
pub const DT: f64 = 1.0 / FPS;
