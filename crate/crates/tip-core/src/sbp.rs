//! Stationary body point (SBP) discovery, labeling, and the run-time root
//! and joint corrections built on them.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::kinematics::{
    forward_kinematics, log_map, two_bone_ik, BodyState, KinematicsError, MotionSequence, Pose,
    Skeleton, L_ANKLE, L_ELBOW, L_HIP, L_KNEE, L_SHOULDER, L_WRIST, NUM_SBPS, R_ANKLE, R_ELBOW,
    R_HIP, R_KNEE, R_SHOULDER, R_WRIST,
};

/// Search-cost temporal regularizer weight.
pub const REGULARIZER_WEIGHT: f64 = 0.3;
/// Activation threshold on the minimal search cost.
pub const SBP_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SbpError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("motion too short: need at least 3 frames")]
    TooShort,
}

/// One SBP candidate slot: an active flag (a probability for predictions,
/// 0/1 for labels) and a body-frame offset from the body origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbpEntry {
    pub active: f64,
    pub offset: Vector3<f64>,
}

impl SbpEntry {
    pub fn inactive() -> Self {
        SbpEntry { active: 0.0, offset: Vector3::zeros() }
    }

    pub fn is_active(&self) -> bool {
        self.active > 0.5
    }
}

/// The five SBP slots of one frame, ordered left foot, right foot, left
/// hand, right hand, pelvis. Flattens to `c` in R^20.
#[derive(Debug, Clone, PartialEq)]
pub struct SbpFrame {
    pub entries: [SbpEntry; NUM_SBPS],
}

impl SbpFrame {
    pub fn inactive() -> Self {
        SbpFrame { entries: [SbpEntry::inactive(); NUM_SBPS] }
    }

    pub fn to_flat(&self) -> [f64; 20] {
        let mut c = [0.0; 20];
        for (i, e) in self.entries.iter().enumerate() {
            c[i * 4] = e.active;
            c[i * 4 + 1] = e.offset.x;
            c[i * 4 + 2] = e.offset.y;
            c[i * 4 + 3] = e.offset.z;
        }
        c
    }

    pub fn from_flat(c: &[f64]) -> Self {
        assert_eq!(c.len(), 20);
        let entries = std::array::from_fn(|i| SbpEntry {
            active: c[i * 4],
            offset: Vector3::new(c[i * 4 + 1], c[i * 4 + 2], c[i * 4 + 3]),
        });
        SbpFrame { entries }
    }
}

/// Axis-aligned body-frame sample box. Flat indexing runs z fastest, then y,
/// then x, so argmin ties break to the lowest flat index deterministically.
#[derive(Debug, Clone)]
pub struct SbpSearchGrid {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub spacing: f64,
}

impl SbpSearchGrid {
    pub fn counts(&self) -> [usize; 3] {
        let n = |lo: f64, hi: f64| ((hi - lo) / self.spacing + 1e-9).floor() as usize + 1;
        [
            n(self.min.x, self.max.x),
            n(self.min.y, self.max.y),
            n(self.min.z, self.max.z),
        ]
    }

    pub fn point(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        Vector3::new(
            self.min.x + ix as f64 * self.spacing,
            self.min.y + iy as f64 * self.spacing,
            self.min.z + iz as f64 * self.spacing,
        )
    }

    /// All sample points in flat-index order.
    pub fn points(&self) -> Vec<Vector3<f64>> {
        let [nx, ny, nz] = self.counts();
        let mut pts = Vec::with_capacity(nx * ny * nz);
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    pts.push(self.point(ix, iy, iz));
                }
            }
        }
        pts
    }

    pub fn num_points(&self) -> usize {
        let [nx, ny, nz] = self.counts();
        nx * ny * nz
    }

    /// Largest body-frame offset magnitude contained in the box.
    pub fn extent(&self) -> f64 {
        self.min.norm().max(self.max.norm())
    }

    /// Default grids per SBP slot: 30x20x6 cm boxes under the feet and small
    /// boxes around the hands at 1 cm spacing; a 40x30x10 cm box behind and
    /// below the hip center at 2 cm spacing.
    pub fn defaults() -> [SbpSearchGrid; NUM_SBPS] {
        let foot = SbpSearchGrid {
            min: Vector3::new(-0.06, -0.10, -0.06),
            max: Vector3::new(0.24, 0.10, 0.0),
            spacing: 0.01,
        };
        let hand = SbpSearchGrid {
            min: Vector3::new(-0.03, -0.03, -0.06),
            max: Vector3::new(0.03, 0.15, 0.0),
            spacing: 0.01,
        };
        let mut hand_r = hand.clone();
        hand_r.min.y = -0.15;
        hand_r.max.y = 0.03;
        let pelvis = SbpSearchGrid {
            min: Vector3::new(-0.30, -0.15, -0.10),
            max: Vector3::new(0.10, 0.15, 0.0),
            spacing: 0.02,
        };
        [foot.clone(), foot, hand, hand_r, pelvis]
    }
}

/// Search-cost of a candidate offset: point speed plus the temporal
/// regularizer toward the previous solution.
#[inline]
pub fn sbp_cost(body: &BodyState, r: &Vector3<f64>, prev_r: Option<&Vector3<f64>>) -> f64 {
    let vel = body
        .angular_velocity
        .cross(&(body.orientation * r))
        + body.linear_velocity;
    let mut cost = vel.norm();
    if let Some(p) = prev_r {
        cost += REGULARIZER_WEIGHT * (r - p).norm();
    }
    cost
}

#[derive(Debug, Clone, Copy)]
pub struct SbpSearchResult {
    pub entry: SbpEntry,
    /// Minimal cost over the grid, before thresholding.
    pub min_cost: f64,
}

/// Exhaustive minimal-velocity search over the grid. Evaluates the cost at
/// every sample point against a precomputed point buffer and thresholds the
/// minimum at [`SBP_THRESHOLD`]. Ties break to the lowest flat index.
pub fn discover_sbp(
    body: &BodyState,
    grid: &SbpSearchGrid,
    prev_r: Option<&Vector3<f64>>,
) -> SbpSearchResult {
    let points = grid.points();
    debug_assert!(points.len() >= 8);
    let mut best = f64::INFINITY;
    let mut best_r = Vector3::zeros();
    for r in &points {
        let cost = sbp_cost(body, r, prev_r);
        if cost < best {
            best = cost;
            best_r = *r;
        }
    }
    if best < SBP_THRESHOLD {
        SbpSearchResult { entry: SbpEntry { active: 1.0, offset: best_r }, min_cost: best }
    } else {
        SbpSearchResult { entry: SbpEntry::inactive(), min_cost: best }
    }
}

/// Per-frame, per-body rigid states with velocities: central differences in
/// the interior, one-sided at the sequence ends.
pub fn motion_body_states(
    skeleton: &Skeleton,
    motion: &MotionSequence,
) -> Result<Vec<Vec<BodyState>>, SbpError> {
    let n = motion.len();
    if n < 3 {
        return Err(SbpError::TooShort);
    }
    let dt = 1.0 / motion.frame_rate;
    let fk: Vec<Vec<BodyState>> = motion
        .frames
        .iter()
        .map(|p| forward_kinematics(skeleton, p))
        .collect();
    let nb = skeleton.num_bodies();
    let mut out = fk.clone();
    for t in 0..n {
        let (prev, next, span) = if t == 0 {
            (0, 1, dt)
        } else if t == n - 1 {
            (n - 2, n - 1, dt)
        } else {
            (t - 1, t + 1, 2.0 * dt)
        };
        for b in 0..nb {
            out[t][b].linear_velocity = (fk[next][b].position - fk[prev][b].position) / span;
            let rel = fk[next][b].orientation * fk[prev][b].orientation.transpose();
            out[t][b].angular_velocity = log_map(&rel) / span;
        }
    }
    Ok(out)
}

/// Ground-truth SBP labels for a whole motion, threading the previous
/// solution through time per body and resetting it when the flag drops.
pub fn label_motion(
    skeleton: &Skeleton,
    motion: &MotionSequence,
    grids: &[SbpSearchGrid; NUM_SBPS],
) -> Result<Vec<SbpFrame>, SbpError> {
    let states = motion_body_states(skeleton, motion)?;
    let mut prev: [Option<Vector3<f64>>; NUM_SBPS] = [None; NUM_SBPS];
    let mut out = Vec::with_capacity(motion.len());
    for frame_states in &states {
        let mut frame = SbpFrame::inactive();
        for (i, &site) in skeleton.sbp_sites.iter().enumerate() {
            let res = discover_sbp(&frame_states[site], &grids[i], prev[i].as_ref());
            prev[i] = res.entry.is_active().then_some(res.entry.offset);
            frame.entries[i] = res.entry;
        }
        out.push(frame);
    }
    Ok(out)
}

/// A persisting SBP anchor: the world position captured at activation and
/// the world position implied by the current (uncorrected) frame.
#[derive(Debug, Clone, Copy)]
pub struct SbpAnchor {
    pub anchored_world: Vector3<f64>,
    pub current_world: Vector3<f64>,
}

/// Horizontal root-velocity correction: averages, over the persisting SBPs,
/// the root velocity that would make each exactly stationary. Only x and y
/// are corrected; z passes through for the terrain module.
pub fn root_correction(anchors: &[SbpAnchor], v_pred: Vector3<f64>, dt: f64) -> Vector3<f64> {
    if anchors.is_empty() {
        return v_pred;
    }
    let mut sum = Vector3::zeros();
    for a in anchors {
        sum += v_pred - (a.current_world - a.anchored_world) / dt;
    }
    let mean = sum / anchors.len() as f64;
    Vector3::new(mean.x, mean.y, v_pred.z)
}

/// Chain selection for the pair-IK correction: which two-bone chain moves
/// for a given active SBP pair. Defaults: a foot paired with the pelvis
/// moves that leg; any pair involving a hand moves that arm.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    /// Per SBP slot: the two-bone chain ending at that slot's body, if any.
    pub chains: [Option<[usize; 3]>; NUM_SBPS],
    /// Slot preference order when both pair members have chains.
    pub priority: [usize; 4],
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            chains: [
                Some([L_HIP, L_KNEE, L_ANKLE]),
                Some([R_HIP, R_KNEE, R_ANKLE]),
                Some([L_SHOULDER, L_ELBOW, L_WRIST]),
                Some([R_SHOULDER, R_ELBOW, R_WRIST]),
                None, // pelvis never moves
            ],
            priority: [2, 3, 0, 1],
        }
    }
}

impl ChainConfig {
    /// Picks the moving slot and its chain for an active pair, or `None` if
    /// neither member has a configured chain.
    pub fn select(&self, pair: (usize, usize)) -> Option<(usize, [usize; 3])> {
        for &slot in &self.priority {
            if (slot == pair.0 || slot == pair.1) && self.chains[slot].is_some() {
                return Some((slot, self.chains[slot].unwrap()));
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct PairIkResult {
    pub pose: Pose,
    pub clamped: bool,
}

/// Joint correction maintaining the world-space vector between a pair of
/// SBPs at its onset value `d0`. The moving SBP (body-local offset
/// `moving_offset`, chain `chain`) is driven so that its world position
/// equals `fixed_world + d0`. Iterates the two-bone solve to account for the
/// end-body orientation change.
pub fn sbp_pair_ik(
    skeleton: &Skeleton,
    pose: &Pose,
    chain: [usize; 3],
    moving_offset: Vector3<f64>,
    fixed_world: Vector3<f64>,
    d0: Vector3<f64>,
) -> Result<PairIkResult, SbpError> {
    let target_point = fixed_world + d0;
    let mut current = pose.clone();
    let mut clamped = false;
    for _ in 0..12 {
        let states = forward_kinematics(skeleton, &current);
        let end = &states[chain[2]];
        let sbp_world = end.position + end.orientation * moving_offset;
        if (sbp_world - target_point).norm() < 1e-9 {
            break;
        }
        let origin_target = target_point - end.orientation * moving_offset;
        let res = two_bone_ik(skeleton, &current, chain, origin_target)?;
        clamped |= res.clamped;
        current = res.pose;
    }
    Ok(PairIkResult { pose: current, clamped })
}

/// Rotation matrix wrapper for test scripting of rigid bodies.
pub fn body_state(
    position: Vector3<f64>,
    orientation: Matrix3<f64>,
    v: Vector3<f64>,
    w: Vector3<f64>,
) -> BodyState {
    BodyState {
        position,
        orientation,
        linear_velocity: v,
        angular_velocity: w,
    }
}
