//! Metric suite for comparing reconstructed motion against ground truth:
//! joint angle error, root-relative joint position error, windowed root
//! translation error and jitter.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kinematics::{
    forward_kinematics, rot6d_to_matrix, rotation_angle, MotionSequence, Skeleton, NUM_JOINTS,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sequence too short for the requested horizon")]
    TooShort,
}

/// Window sampling strategy for the root error metric.
#[derive(Debug, Clone, Copy)]
pub enum WindowMode {
    /// Deterministic windows every second.
    Strided,
    /// Seeded random windows, `count` per horizon.
    SeededRandom { seed: u64, count: usize },
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub joint_angle_error_deg: f64,
    pub joint_position_error_cm: f64,
    pub root_error_m: [f64; 3],
    pub joint_jitter: f64,
    pub root_jitter: f64,
    pub window_frames: usize,
}

impl EvalReport {
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("joint_angle_error_deg = {:.6}", self.joint_angle_error_deg),
            format!("joint_position_error_cm = {:.6}", self.joint_position_error_cm),
            format!("root_error_2s_m = {:.6}", self.root_error_m[0]),
            format!("root_error_5s_m = {:.6}", self.root_error_m[1]),
            format!("root_error_10s_m = {:.6}", self.root_error_m[2]),
            format!("joint_jitter_m_s3 = {:.6}", self.joint_jitter),
            format!("root_jitter_m_s3 = {:.6}", self.root_jitter),
            format!("window_frames = {}", self.window_frames),
        ]
    }
}

fn check_lengths(pred: &MotionSequence, gt: &MotionSequence) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    Ok(())
}

/// Mean geodesic angle (degrees) between predicted and ground-truth local
/// joint rotations, over all 18 joints and all frames.
pub fn joint_angle_error(pred: &MotionSequence, gt: &MotionSequence) -> Result<f64, EvalError> {
    check_lengths(pred, gt)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        for j in 0..NUM_JOINTS {
            let rp = rot6d_to_matrix(&p.joint_rotations[j]).expect("valid pose");
            let rg = rot6d_to_matrix(&g.joint_rotations[j]).expect("valid pose");
            total += rotation_angle(&(rp * rg.transpose())).to_degrees();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean Euclidean joint position error (cm) after aligning the root
/// translation per frame. Root orientation is not aligned.
pub fn root_relative_position_error(
    pred: &MotionSequence,
    gt: &MotionSequence,
    skeleton: &Skeleton,
) -> Result<f64, EvalError> {
    check_lengths(pred, gt)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        let sp = forward_kinematics(skeleton, p);
        let sg = forward_kinematics(skeleton, g);
        let shift = sg[0].position - sp[0].position;
        for j in 1..skeleton.num_bodies() {
            total += (sp[j].position + shift - sg[j].position).norm();
            count += 1;
        }
    }
    Ok(total / count as f64 * 100.0)
}

/// Root translation error (m) at 2 s / 5 s / 10 s horizons: each window is
/// aligned at its start and measured at its end, then averaged over windows.
pub fn root_error_windows(
    pred: &MotionSequence,
    gt: &MotionSequence,
    mode: WindowMode,
) -> Result<[f64; 3], EvalError> {
    check_lengths(pred, gt)?;
    let fps = gt.frame_rate as usize;
    let horizons = [2 * fps, 5 * fps, 10 * fps];
    let n = gt.len();
    let mut out = [0.0; 3];
    for (hi, h) in horizons.iter().enumerate() {
        if n <= *h {
            return Err(EvalError::TooShort);
        }
        let starts: Vec<usize> = match mode {
            WindowMode::Strided => (0..=(n - 1 - h)).step_by(fps).collect(),
            WindowMode::SeededRandom { seed, count } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count).map(|_| rng.gen_range(0..=(n - 1 - h))).collect()
            }
        };
        let mut total = 0.0;
        for &s in &starts {
            let offset = gt.frames[s].root_position - pred.frames[s].root_position;
            let end_err =
                (pred.frames[s + h].root_position + offset - gt.frames[s + h].root_position).norm();
            total += end_err;
        }
        out[hi] = total / starts.len() as f64;
    }
    Ok(out)
}

/// Mean magnitude of the discrete third derivative of a position series:
/// `|p(t+1) - 3 p(t) + 3 p(t-1) - p(t-2)| / dt^3`.
pub fn jitter(positions: &[Vector3<f64>], dt: f64) -> Result<f64, EvalError> {
    if positions.len() < 4 {
        return Err(EvalError::TooShort);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 2..positions.len() - 1 {
        let d = positions[t + 1] - 3.0 * positions[t] + 3.0 * positions[t - 1] - positions[t - 2];
        total += d.norm() / (dt * dt * dt);
        count += 1;
    }
    Ok(total / count as f64)
}

/// Jitter of every non-root joint's world position, averaged over joints.
pub fn joint_jitter(
    motion: &MotionSequence,
    skeleton: &Skeleton,
) -> Result<f64, EvalError> {
    if motion.len() < 4 {
        return Err(EvalError::TooShort);
    }
    let dt = 1.0 / motion.frame_rate;
    let fk: Vec<Vec<Vector3<f64>>> = motion
        .frames
        .iter()
        .map(|p| {
            forward_kinematics(skeleton, p)
                .iter()
                .map(|s| s.position)
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for j in 1..skeleton.num_bodies() {
        let series: Vec<Vector3<f64>> = fk.iter().map(|f| f[j]).collect();
        total += jitter(&series, dt)?;
    }
    Ok(total / (skeleton.num_bodies() - 1) as f64)
}

/// Full metric report over a pair of motions.
pub fn evaluate(
    pred: &MotionSequence,
    gt: &MotionSequence,
    skeleton: &Skeleton,
    mode: WindowMode,
) -> Result<EvalReport, EvalError> {
    let dt = 1.0 / gt.frame_rate;
    let root_pred: Vec<Vector3<f64>> = pred.frames.iter().map(|f| f.root_position).collect();
    Ok(EvalReport {
        joint_angle_error_deg: joint_angle_error(pred, gt)?,
        joint_position_error_cm: root_relative_position_error(pred, gt, skeleton)?,
        root_error_m: root_error_windows(pred, gt, mode)?,
        joint_jitter: joint_jitter(pred, skeleton)?,
        root_jitter: jitter(&root_pred, dt)?,
        window_frames: gt.len(),
    })
}
