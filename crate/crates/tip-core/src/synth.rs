//! Synthetic motion generators used for tests, toy training and the CLI's
//! built-in fixtures.

use nalgebra::{Rotation3, Vector3};

use crate::kinematics::{
    matrix_to_rot6d, two_bone_ik, MotionSequence, Pose, Skeleton, L_ANKLE, L_HIP, L_KNEE, R_ANKLE,
    R_HIP, R_KNEE,
};

/// Static standing (T pose) clip with zero root velocity.
pub fn standing(skeleton: &Skeleton, frames: usize) -> MotionSequence {
    let pose = Pose::identity(skeleton);
    let mut motion = MotionSequence::new(vec![pose; frames], skeleton.name);
    motion.root_velocities = Some(vec![Vector3::zeros(); frames]);
    motion
}

/// Smoothstep interpolation on [0, 1].
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Stance fraction of each gait cycle; the remainder is swing. Both legs in
/// stance overlap for 2 * (STANCE - 0.5) of the cycle (double support).
const STANCE_FRACTION: f64 = 0.6;

/// World-space foot (ankle) target along the walk direction for a leg with
/// the given phase offset, in units of strides. See [`walk`].
fn foot_progress(cycle_pos: f64, phase_offset: f64) -> (f64, f64) {
    let psi = cycle_pos + phase_offset;
    let k = psi.floor();
    let frac = psi - k;
    if frac < STANCE_FRACTION {
        (k + 0.3 - phase_offset, 0.0)
    } else {
        let u = (frac - STANCE_FRACTION) / (1.0 - STANCE_FRACTION);
        (k + 0.3 + smoothstep(u) - phase_offset, (std::f64::consts::PI * u).sin())
    }
}

/// Kinematically consistent walk: the root advances at constant speed while
/// the feet alternate between world-fixed stance and a smooth swing,
/// solved per frame with two-bone leg IK. Stance feet are exactly
/// stationary, which makes the clip a clean SBP fixture.
pub fn walk(skeleton: &Skeleton, frames: usize, speed: f64) -> MotionSequence {
    let cycle_s = 1.0; // one step per leg per second
    let stride = speed * cycle_s;
    let dt = 1.0 / crate::FPS;
    let root_z = skeleton.standing_root_height() - 0.03;
    let ankle_z = 0.05;
    let lift = 0.04;

    let hip_bend = Rotation3::from_axis_angle(&Vector3::y_axis(), -0.2).into_inner();
    let knee_bend = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.4).into_inner();

    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let t = i as f64 * dt;
        let cycle_pos = t / cycle_s;
        let mut pose = Pose::identity(skeleton);
        pose.root_position = Vector3::new(speed * t, 0.0, root_z);
        // pre-bent legs give the IK a stable bend axis
        pose.joint_rotations[L_HIP - 1] = matrix_to_rot6d(&hip_bend);
        pose.joint_rotations[L_KNEE - 1] = matrix_to_rot6d(&knee_bend);
        pose.joint_rotations[R_HIP - 1] = matrix_to_rot6d(&hip_bend);
        pose.joint_rotations[R_KNEE - 1] = matrix_to_rot6d(&knee_bend);

        for (chain, phase, y) in [
            ([L_HIP, L_KNEE, L_ANKLE], 0.0, 0.09),
            ([R_HIP, R_KNEE, R_ANKLE], 0.5, -0.09),
        ] {
            let (progress, lift_frac) = foot_progress(cycle_pos, phase);
            let target = Vector3::new(progress * stride, y, ankle_z + lift * lift_frac);
            let solved = two_bone_ik(skeleton, &pose, chain, target)
                .expect("walk targets stay within leg reach");
            pose = solved.pose;
        }
        out.push(pose);
    }
    let mut motion = MotionSequence::new(out, skeleton.name);
    motion.root_velocities = Some(vec![Vector3::new(speed, 0.0, 0.0); frames]);
    motion
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::forward_kinematics;

    #[test]
    fn walk_feet_reach_targets_and_root_advances() {
        let s = Skeleton::default_figure();
        let m = walk(&s, 180, 0.3);
        assert_eq!(m.len(), 180);
        // root advances linearly
        let p0 = m.frames[0].root_position;
        let p1 = m.frames[179].root_position;
        assert!((p1.x - p0.x - 0.3 * 179.0 / 60.0).abs() < 1e-9);
        // stance feet are world-fixed: frames 6..30 are left-stance
        let fk6 = forward_kinematics(&s, &m.frames[6]);
        let fk20 = forward_kinematics(&s, &m.frames[20]);
        assert!(
            (fk6[L_ANKLE].position - fk20[L_ANKLE].position).norm() < 1e-6,
            "stance foot moved"
        );
    }

    #[test]
    fn standing_is_static() {
        let s = Skeleton::default_figure();
        let m = standing(&s, 10);
        assert_eq!(m.frames[0], m.frames[9]);
    }
}
