//! Simplified articulated skeleton, rotation representations, forward
//! kinematics, rigid-body velocities and the analytic two-bone IK used by
//! the SBP corrector.
//!
//! Frame convention: x front, y left, z up. All lengths in meters.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// 6D rotation representation: the first two columns of a rotation matrix,
/// stored column-major as `[m00, m10, m20, m01, m11, m21]`.
pub type Rot6 = [f64; 6];

pub const NUM_BODIES: usize = 19;
pub const NUM_JOINTS: usize = 18;
pub const NUM_IMUS: usize = 6;
pub const NUM_SBPS: usize = 5;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("degenerate 6D rotation input")]
    DegenerateInput,
    #[error("relative rotation too close to pi for log-map differentiation")]
    SingularRotation,
    #[error("invalid IK chain: {0}")]
    ChainInvalid(&'static str),
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: &'static str,
    /// Parent body index; `None` only for the root.
    pub parent: Option<usize>,
    /// Fixed translational offset from the parent body, in the parent frame.
    pub offset: Vector3<f64>,
}

/// Fixed 19-body skeleton: root/pelvis, spine x4, neck, head, three joints
/// per arm and per leg. 18 internal joints, so q lives in R^108.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
    /// Body indices carrying an IMU, in stream order:
    /// head, waist/root, left wrist, right wrist, left lower leg, right lower leg.
    pub imu_sites: [usize; NUM_IMUS],
    /// SBP candidate bodies, in label order:
    /// left foot, right foot, left hand, right hand, pelvis.
    pub sbp_sites: [usize; NUM_SBPS],
    pub name: &'static str,
}

pub const ROOT: usize = 0;
pub const SPINE1: usize = 1;
pub const SPINE2: usize = 2;
pub const SPINE3: usize = 3;
pub const SPINE4: usize = 4;
pub const NECK: usize = 5;
pub const HEAD: usize = 6;
pub const L_SHOULDER: usize = 7;
pub const L_ELBOW: usize = 8;
pub const L_WRIST: usize = 9;
pub const R_SHOULDER: usize = 10;
pub const R_ELBOW: usize = 11;
pub const R_WRIST: usize = 12;
pub const L_HIP: usize = 13;
pub const L_KNEE: usize = 14;
pub const L_ANKLE: usize = 15;
pub const R_HIP: usize = 16;
pub const R_KNEE: usize = 17;
pub const R_ANKLE: usize = 18;

impl Skeleton {
    /// Default skeleton for a roughly 1.7 m figure.
    pub fn default_figure() -> Self {
        let j = |name, parent, x, y, z| Joint {
            name,
            parent: Some(parent),
            offset: Vector3::new(x, y, z),
        };
        let joints = vec![
            Joint { name: "root", parent: None, offset: Vector3::zeros() },
            j("spine1", ROOT, 0.0, 0.0, 0.10),
            j("spine2", SPINE1, 0.0, 0.0, 0.10),
            j("spine3", SPINE2, 0.0, 0.0, 0.10),
            j("spine4", SPINE3, 0.0, 0.0, 0.10),
            j("neck", SPINE4, 0.0, 0.0, 0.08),
            j("head", NECK, 0.0, 0.0, 0.10),
            j("l_shoulder", SPINE4, 0.0, 0.18, 0.02),
            j("l_elbow", L_SHOULDER, 0.0, 0.28, 0.0),
            j("l_wrist", L_ELBOW, 0.0, 0.25, 0.0),
            j("r_shoulder", SPINE4, 0.0, -0.18, 0.02),
            j("r_elbow", R_SHOULDER, 0.0, -0.28, 0.0),
            j("r_wrist", R_ELBOW, 0.0, -0.25, 0.0),
            j("l_hip", ROOT, 0.0, 0.09, -0.02),
            j("l_knee", L_HIP, 0.0, 0.0, -0.42),
            j("l_ankle", L_KNEE, 0.0, 0.0, -0.43),
            j("r_hip", ROOT, 0.0, -0.09, -0.02),
            j("r_knee", R_HIP, 0.0, 0.0, -0.42),
            j("r_ankle", R_KNEE, 0.0, 0.0, -0.43),
        ];
        Skeleton {
            joints,
            imu_sites: [HEAD, ROOT, L_WRIST, R_WRIST, L_KNEE, R_KNEE],
            sbp_sites: [L_ANKLE, R_ANKLE, L_WRIST, R_WRIST, ROOT],
            name: "default-figure",
        }
    }

    pub fn num_bodies(&self) -> usize {
        self.joints.len()
    }

    /// Standing root height above ground, assuming a 5 cm foot clearance.
    pub fn standing_root_height(&self) -> f64 {
        let mut z = 0.0;
        let mut body = L_ANKLE;
        while let Some(p) = self.joints[body].parent {
            z += self.joints[body].offset.z;
            body = p;
        }
        -z + 0.05
    }

    /// Nominal stature: ankle-to-head vertical extent in T pose plus fixed
    /// allowances for the foot sole and cranium.
    pub fn height(&self) -> f64 {
        let pose = Pose::identity(self);
        let states = forward_kinematics(self, &pose);
        let head_z = states[HEAD].position.z;
        let ankle_z = states[L_ANKLE].position.z;
        head_z - ankle_z + 0.20
    }

    /// Validates topological order, site counts and bone offsets.
    pub fn validate(&self) -> bool {
        if self.joints.len() != NUM_BODIES {
            return false;
        }
        if self.joints[0].parent.is_some() {
            return false;
        }
        for (i, j) in self.joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < i => {}
                _ => return false,
            }
            if !j.offset.iter().all(|v| v.is_finite()) {
                return false;
            }
        }
        let h = self.height();
        (1.4..=2.0).contains(&h)
    }
}

/// Full-body pose: root transform plus 18 local joint rotations in 6D form.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_position: Vector3<f64>,
    pub root_orientation: Matrix3<f64>,
    pub joint_rotations: Vec<Rot6>,
}

impl Pose {
    /// T pose at the skeleton's standing height.
    pub fn identity(skeleton: &Skeleton) -> Self {
        Pose {
            root_position: Vector3::new(0.0, 0.0, skeleton.standing_root_height()),
            root_orientation: Matrix3::identity(),
            joint_rotations: vec![IDENTITY_ROT6; skeleton.num_bodies() - 1],
        }
    }

    pub fn flat_q(&self) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.joint_rotations.len() * 6);
        for r in &self.joint_rotations {
            q.extend_from_slice(r);
        }
        q
    }

    pub fn set_flat_q(&mut self, q: &[f64]) {
        assert_eq!(q.len(), self.joint_rotations.len() * 6);
        for (i, r) in self.joint_rotations.iter_mut().enumerate() {
            r.copy_from_slice(&q[i * 6..i * 6 + 6]);
        }
    }
}

pub const IDENTITY_ROT6: Rot6 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// A motion clip at 60 fps with optional ground-truth root velocities.
#[derive(Debug, Clone)]
pub struct MotionSequence {
    pub frame_rate: f64,
    pub frames: Vec<Pose>,
    pub root_velocities: Option<Vec<Vector3<f64>>>,
    pub skeleton_name: String,
}

impl MotionSequence {
    pub fn new(frames: Vec<Pose>, skeleton_name: &str) -> Self {
        MotionSequence {
            frame_rate: crate::FPS,
            frames,
            root_velocities: None,
            skeleton_name: skeleton_name.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-body rigid state. Velocities are filled in by [`body_velocities`].
#[derive(Debug, Clone, Copy)]
pub struct BodyState {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl BodyState {
    pub fn at_rest(position: Vector3<f64>, orientation: Matrix3<f64>) -> Self {
        BodyState {
            position,
            orientation,
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }
}

/// Reconstructs a rotation matrix from its first two columns via
/// Gram-Schmidt; the third column is their cross product.
pub fn rot6d_to_matrix(r6: &Rot6) -> Result<Matrix3<f64>, KinematicsError> {
    if !r6.iter().all(|v| v.is_finite()) {
        return Err(KinematicsError::DegenerateInput);
    }
    let c0 = Vector3::new(r6[0], r6[1], r6[2]);
    let c1 = Vector3::new(r6[3], r6[4], r6[5]);
    let n0 = c0.norm();
    if n0 < 1e-9 {
        return Err(KinematicsError::DegenerateInput);
    }
    let b0 = c0 / n0;
    let proj = c1 - b0 * b0.dot(&c1);
    let n1 = proj.norm();
    if n1 < 1e-9 {
        return Err(KinematicsError::DegenerateInput);
    }
    let b1 = proj / n1;
    let b2 = b0.cross(&b1);
    Ok(Matrix3::from_columns(&[b0, b1, b2]))
}

/// First two columns of `m`, column-major.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Rot6 {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Orthogonal polar factor of an arbitrary 3x3 matrix: the rotation closest
/// to `m` in the Frobenius norm (chordal projection).
pub fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // flip the singular vector of the smallest singular value
        let mut u2 = u;
        u2.set_column(2, &(-u.column(2)));
        r = u2 * vt;
    }
    r
}

/// Geodesic angle (radians) of a rotation matrix.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Rotation log-map: scaled axis of `r`.
pub fn log_map(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    q.scaled_axis()
}

/// World transform per body: parent transform, then the fixed bone offset,
/// then the local joint rotation. Velocities are left zero.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Vec<BodyState> {
    let mut out: Vec<BodyState> = Vec::with_capacity(skeleton.num_bodies());
    out.push(BodyState::at_rest(pose.root_position, pose.root_orientation));
    for (i, joint) in skeleton.joints.iter().enumerate().skip(1) {
        let parent = &out[joint.parent.unwrap()];
        let position = parent.position + parent.orientation * joint.offset;
        let local = rot6d_to_matrix(&pose.joint_rotations[i - 1])
            .expect("pose invariant: valid 6D rotations");
        let orientation = parent.orientation * local;
        out.push(BodyState::at_rest(position, orientation));
    }
    out
}

/// Body states at the middle of a 3-pose window with velocities from central
/// differences. Angular velocity comes from the log-map of
/// `R(t+1) R(t-1)^T` divided by `2 dt`; if that relative rotation is within
/// 1e-9 of pi, falls back to the one-sided forward difference.
pub fn body_velocities(
    skeleton: &Skeleton,
    frames: &[Pose; 3],
    dt: f64,
) -> Result<Vec<BodyState>, KinematicsError> {
    assert!(dt > 0.0);
    let prev = forward_kinematics(skeleton, &frames[0]);
    let mid = forward_kinematics(skeleton, &frames[1]);
    let next = forward_kinematics(skeleton, &frames[2]);
    let mut out = Vec::with_capacity(mid.len());
    for i in 0..mid.len() {
        let v = (next[i].position - prev[i].position) / (2.0 * dt);
        let rel = next[i].orientation * prev[i].orientation.transpose();
        let w = if (rotation_angle(&rel) - std::f64::consts::PI).abs() < 1e-9 {
            let rel1 = next[i].orientation * mid[i].orientation.transpose();
            if (rotation_angle(&rel1) - std::f64::consts::PI).abs() < 1e-9 {
                return Err(KinematicsError::SingularRotation);
            }
            log_map(&rel1) / dt
        } else {
            log_map(&rel) / (2.0 * dt)
        };
        out.push(BodyState {
            position: mid[i].position,
            orientation: mid[i].orientation,
            linear_velocity: v,
            angular_velocity: w,
        });
    }
    Ok(out)
}

/// Velocity of the body-fixed point at local offset `r`:
/// `omega x (R_B r) + v`.
pub fn point_velocity(body: &BodyState, r: &Vector3<f64>) -> Vector3<f64> {
    body.angular_velocity.cross(&(body.orientation * r)) + body.linear_velocity
}

#[derive(Debug, Clone)]
pub struct IkResult {
    pub pose: Pose,
    /// True when the target was out of reach and the solve used the clamped
    /// distance.
    pub clamped: bool,
}

fn angle_axis(angle: f64, axis: Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Any unit vector perpendicular to `v`.
fn any_perpendicular(v: &Vector3<f64>) -> Vector3<f64> {
    let candidate = if v.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    v.cross(&candidate).normalize()
}

/// Analytic two-bone IK. `chain` is `[upper, mid, end]` body indices with
/// `mid` parented to `upper` and `end` to `mid`. Moves the end body origin to
/// `target` by adjusting only the two chain joints, preserving the bend axis
/// of the input pose. Out-of-reach targets are clamped to the annulus
/// `[|a-b|, a+b]` and flagged.
pub fn two_bone_ik(
    skeleton: &Skeleton,
    pose: &Pose,
    chain: [usize; 3],
    target: Vector3<f64>,
) -> Result<IkResult, KinematicsError> {
    let [c0, c1, c2] = chain;
    if c0 == 0 || c1 == 0 || c2 == 0 {
        return Err(KinematicsError::ChainInvalid("root cannot be a chain joint"));
    }
    if skeleton.joints[c1].parent != Some(c0) || skeleton.joints[c2].parent != Some(c1) {
        return Err(KinematicsError::ChainInvalid("chain bodies are not parent-linked"));
    }
    let states = forward_kinematics(skeleton, pose);
    let a = states[c0].position;
    let b = states[c1].position;
    let c = states[c2].position;
    let lab = (b - a).norm();
    let lcb = (c - b).norm();
    if lab < 1e-9 || lcb < 1e-9 {
        return Err(KinematicsError::ChainInvalid("zero-length bone"));
    }
    let eps = 1e-9;
    let dist = (target - a).norm();
    let lo = (lab - lcb).abs() + eps;
    let hi = lab + lcb - eps;
    let clamped = dist < lo || dist > hi;
    let lat = dist.clamp(lo, hi);

    let dir_ac = (c - a) / (c - a).norm().max(1e-12);
    let dir_ab = (b - a) / lab;
    let dir_ba = -dir_ab;
    let dir_bc = (c - b) / lcb;
    let dir_at = (target - a) / (target - a).norm().max(1e-12);

    let ac_ab_0 = dir_ac.dot(&dir_ab).clamp(-1.0, 1.0).acos();
    let ba_bc_0 = dir_ba.dot(&dir_bc).clamp(-1.0, 1.0).acos();
    let ac_at_0 = dir_ac.dot(&dir_at).clamp(-1.0, 1.0).acos();

    let ac_ab_1 = ((lcb * lcb - lab * lab - lat * lat) / (-2.0 * lab * lat))
        .clamp(-1.0, 1.0)
        .acos();
    let ba_bc_1 = ((lat * lat - lab * lab - lcb * lcb) / (-2.0 * lab * lcb))
        .clamp(-1.0, 1.0)
        .acos();

    // Bend axis: from the current pose when it is bent, otherwise any axis
    // perpendicular to the chain.
    let cross_bend = (c - a).cross(&(b - a));
    let axis_bend = if cross_bend.norm() > 1e-8 {
        cross_bend.normalize()
    } else {
        any_perpendicular(&dir_ab)
    };
    let r0 = angle_axis(ac_ab_1 - ac_ab_0, axis_bend);
    let r1 = angle_axis(ba_bc_1 - ba_bc_0, axis_bend);

    let cross_aim = (c - a).cross(&(target - a));
    let r2 = if cross_aim.norm() > 1e-12 && ac_at_0 > 1e-12 {
        angle_axis(ac_at_0, cross_aim.normalize())
    } else {
        Matrix3::identity()
    };

    let new_a_world = r2 * r0 * states[c0].orientation;
    let new_b_world = r2 * r0 * r1 * states[c1].orientation;

    let parent_a = states[skeleton.joints[c0].parent.unwrap()].orientation;
    let new_a_local = parent_a.transpose() * new_a_world;
    let new_b_local = new_a_world.transpose() * new_b_world;

    let mut out = pose.clone();
    out.joint_rotations[c0 - 1] = matrix_to_rot6d(&new_a_local);
    out.joint_rotations[c1 - 1] = matrix_to_rot6d(&new_b_local);
    Ok(IkResult { pose: out, clamped })
}

/// Uniformly distributed random rotation: normalized Gaussian quaternion.
pub fn random_rotation<R: rand::Rng>(rng: &mut R) -> Matrix3<f64> {
    let mut gauss = || {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let q = nalgebra::Quaternion::new(gauss(), gauss(), gauss(), gauss());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}
