//! The online per-frame reconstruction loop: IMU preprocessing with a
//! 5-frame look-ahead, autoregressive pose prediction, SBP-anchored
//! horizontal root correction, terrain-proposed vertical correction,
//! soft-IK history write-back, and EMA output smoothing.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::imu::{features_at, ImuFrame, FILTER_LOOKAHEAD};
use crate::kinematics::{
    forward_kinematics, matrix_to_rot6d, rot6d_to_matrix, KinematicsError, Pose, Rot6, Skeleton,
    L_ANKLE, NUM_SBPS, R_ANKLE,
};
use crate::model::{predict_step, HistoryBuffer, ModelError, ModelParams, C_DIM, Q_DIM};
use crate::sbp::{root_correction, sbp_pair_ik, ChainConfig, SbpAnchor, SbpError, SbpFrame};
use crate::terrain::{
    vertical_root_correction, SbpObservation, TerrainConfig, TerrainSource, TerrainState,
};
use crate::DT;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline not calibrated with an initial pose")]
    NotCalibrated,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sbp(#[from] SbpError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub ema_alpha_joints: f64,
    pub ema_alpha_root: f64,
    /// Disables output smoothing entirely when false.
    pub ema_enabled: bool,
    /// Disables the pair-IK history write-back when false (A/B testing).
    pub pair_ik_enabled: bool,
    pub terrain: TerrainConfig,
    pub chains: ChainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ema_alpha_joints: 0.8,
            ema_alpha_root: 0.9,
            ema_enabled: true,
            pair_ik_enabled: true,
            terrain: TerrainConfig::default(),
            chains: ChainConfig::default(),
        }
    }
}

/// Anything that can play the model's role in the loop. Production code
/// uses [`ModelParams`]; tests use scripted predictors.
pub trait Predictor {
    fn predict(
        &self,
        buffer: &HistoryBuffer,
        imu: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ModelError>;
}

impl Predictor for ModelParams {
    fn predict(
        &self,
        buffer: &HistoryBuffer,
        imu: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ModelError> {
        predict_step(self, buffer, imu)
    }
}

/// One emitted reconstruction frame. `frame` indexes the sensor stream; the
/// output for sensor frame t becomes available after frame t+5 is pushed
/// (the filter look-ahead) or at flush.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub frame: usize,
    pub pose: Pose,
    pub sbp: SbpFrame,
    /// Vertical terrain proposal applied this frame, meters per frame.
    pub proposal: f64,
}

#[derive(Debug, Clone, Copy)]
struct SlotState {
    active: bool,
    age: usize,
    anchored_world: Vector3<f64>,
    offset: Vector3<f64>,
    cluster: Option<usize>,
}

impl SlotState {
    fn inactive() -> Self {
        SlotState {
            active: false,
            age: 0,
            anchored_world: Vector3::zeros(),
            offset: Vector3::zeros(),
            cluster: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PairState {
    moving: usize,
    chain: [usize; 3],
    fixed: usize,
    d0: Vector3<f64>,
}

/// Full state of the online loop. Owned by a single thread.
pub struct PoserState {
    pub skeleton: Skeleton,
    pub config: PipelineConfig,
    pub buffer: HistoryBuffer,
    pub root_position: Vector3<f64>,
    pub terrain: TerrainState,
    slots: [SlotState; NUM_SBPS],
    pair: Option<PairState>,
    raw: Vec<ImuFrame>,
    processed: usize,
    ema_q: Option<Vec<Rot6>>,
    ema_root: Option<Vector3<f64>>,
    frame_counter: usize,
}

impl PoserState {
    /// Starts a capture from the calibration-time initial pose.
    pub fn new(skeleton: Skeleton, config: PipelineConfig, initial_pose: &Pose) -> Self {
        let buffer = HistoryBuffer::new(
            crate::model::ModelConfig::default().max_window,
            &initial_pose.flat_q(),
            &[0.0; C_DIM],
        );
        Self::with_window(skeleton, config, initial_pose, buffer)
    }

    /// As [`new`](Self::new) but with a caller-built history buffer (to
    /// match a non-default model window).
    pub fn with_window(
        skeleton: Skeleton,
        config: PipelineConfig,
        initial_pose: &Pose,
        buffer: HistoryBuffer,
    ) -> Self {
        // the capture starts standing, so the initial ground plane sits one
        // standing root height below the starting root
        let mut ground = initial_pose.root_position;
        ground.z -= skeleton.standing_root_height();
        let terrain = TerrainState::new(config.terrain.clone(), ground);
        PoserState {
            skeleton,
            config,
            buffer,
            root_position: initial_pose.root_position,
            terrain,
            slots: [SlotState::inactive(); NUM_SBPS],
            pair: None,
            raw: Vec::new(),
            processed: 0,
            ema_q: None,
            ema_root: None,
            frame_counter: 0,
        }
    }

    /// Number of sensor frames pushed so far.
    pub fn frames_pushed(&self) -> usize {
        self.raw.len()
    }

    /// Streams one calibrated sensor frame in. Returns the output for the
    /// frame 5 steps behind once enough look-ahead has accumulated.
    pub fn push<P: Predictor>(
        &mut self,
        frame: ImuFrame,
        predictor: &P,
    ) -> Result<Option<StepOutput>, PipelineError> {
        self.raw.push(frame);
        if self.raw.len() >= self.processed + FILTER_LOOKAHEAD + 1 {
            let t = self.processed;
            let feats = features_at(&self.raw, t);
            let out = self.step_with_features(t, &feats.0, predictor)?;
            self.processed += 1;
            Ok(Some(out))
        } else {
            Ok(None)
        }
    }

    /// Drains the look-ahead queue at end of stream. The truncated filter
    /// windows match the batch path exactly.
    pub fn flush<P: Predictor>(
        &mut self,
        predictor: &P,
    ) -> Result<Vec<StepOutput>, PipelineError> {
        let mut out = Vec::new();
        while self.processed < self.raw.len() {
            let t = self.processed;
            let feats = features_at(&self.raw, t);
            out.push(self.step_with_features(t, &feats.0, predictor)?);
            self.processed += 1;
        }
        Ok(out)
    }

    /// The ordered sub-steps of one frame, operating on precomputed IMU
    /// features. Shared verbatim by the streaming and batch paths.
    pub fn step_with_features<P: Predictor>(
        &mut self,
        t: usize,
        feats: &[f64],
        predictor: &P,
    ) -> Result<StepOutput, PipelineError> {
        // (2) autoregressive prediction over the buffered window
        let (q, v_raw, c) = predictor.predict(&self.buffer, feats)?;
        let v_pred = Vector3::new(v_raw[0], v_raw[1], v_raw[2]);
        // root orientation comes straight from the waist IMU
        let root_orientation = self.raw.get(t).map(|f| f.orientations[1]).unwrap_or_else(|| {
            // batch path: features arrive without raw frames; orientation is
            // embedded in the first 9 feature channels of the waist sensor
            waist_orientation_from_features(feats)
        });

        let mut pose = Pose {
            root_position: self.root_position,
            root_orientation,
            joint_rotations: vec![crate::kinematics::IDENTITY_ROT6; Q_DIM / 6],
        };
        pose.set_flat_q(&q);
        let states = forward_kinematics(&self.skeleton, &pose);
        let sbp = SbpFrame::from_flat(&c);

        // (3) horizontal root correction from persisting anchors
        let mut anchors = Vec::new();
        let mut current_world = [Vector3::zeros(); NUM_SBPS];
        for (i, &site) in self.skeleton.sbp_sites.iter().enumerate() {
            let entry = &sbp.entries[i];
            let offset = if entry.is_active() && self.slots[i].active {
                self.slots[i].offset
            } else {
                entry.offset
            };
            let st = &states[site];
            // world position the uncorrected prediction implies this frame
            current_world[i] = st.position + st.orientation * offset + v_pred * DT;
            if entry.is_active() && self.slots[i].active {
                anchors.push(SbpAnchor {
                    anchored_world: self.slots[i].anchored_world,
                    current_world: current_world[i],
                });
            }
        }
        let v_corr = root_correction(&anchors, v_pred, DT);

        // (4) terrain observation and vertical correction
        let mut proposals = Vec::new();
        let feet_heights = [states[L_ANKLE].position.z, states[R_ANKLE].position.z];
        for (i, source) in [
            (0usize, TerrainSource::LeftFoot),
            (1, TerrainSource::RightFoot),
            (4, TerrainSource::Pelvis),
        ] {
            let active_now = sbp.entries[i].is_active();
            let slot = self.slots[i];
            if active_now && slot.active {
                let obs = SbpObservation {
                    position: current_world[i],
                    source,
                    age: slot.age + 1,
                    deactivated_early: false,
                };
                if let Some(cl) = slot.cluster {
                    proposals.push(self.terrain.proposal_for(cl, current_world[i].z));
                } else if self.terrain.accepts(&obs, &feet_heights) {
                    let outcome = self.terrain.observe(&obs);
                    self.slots[i].cluster = Some(outcome.cluster);
                    proposals.push(outcome.proposal);
                }
            } else if !active_now && slot.active && slot.cluster.is_none() {
                // deactivated before reaching the age gate: consumed once
                let obs = SbpObservation {
                    position: slot.anchored_world,
                    source,
                    age: slot.age,
                    deactivated_early: true,
                };
                if self.terrain.accepts(&obs, &feet_heights) {
                    self.terrain.observe(&obs);
                }
            }
        }
        let proposal = if proposals.is_empty() {
            0.0
        } else {
            proposals.iter().sum::<f64>() / proposals.len() as f64
        };

        // (5) integrate the root: corrected horizontal velocity, vertical
        // velocity plus the per-frame terrain proposal
        let dz = vertical_root_correction(v_corr.z * DT, proposal);
        self.root_position += Vector3::new(v_corr.x * DT, v_corr.y * DT, dz);
        pose.root_position = self.root_position;

        // refresh slot lifecycle with the corrected pose
        let corrected_states = forward_kinematics(&self.skeleton, &pose);
        for (i, &site) in self.skeleton.sbp_sites.iter().enumerate() {
            let entry = &sbp.entries[i];
            if entry.is_active() {
                if self.slots[i].active {
                    self.slots[i].age += 1;
                } else {
                    let st = &corrected_states[site];
                    self.slots[i] = SlotState {
                        active: true,
                        age: 0,
                        anchored_world: st.position + st.orientation * entry.offset,
                        offset: entry.offset,
                        cluster: None,
                    };
                }
            } else {
                self.slots[i] = SlotState::inactive();
            }
        }

        // (6) soft-IK write-back: the emitted pose keeps q_t; the corrected
        // q~_t feeds the history buffer
        let mut feedback_q = q.clone();
        self.update_pair(&corrected_states);
        if self.config.pair_ik_enabled {
            if let Some(pair) = self.pair {
                let fixed_site = self.skeleton.sbp_sites[pair.fixed];
                let st = &corrected_states[fixed_site];
                let fixed_world = st.position + st.orientation * self.slots[pair.fixed].offset;
                let res = sbp_pair_ik(
                    &self.skeleton,
                    &pose,
                    pair.chain,
                    self.slots[pair.moving].offset,
                    fixed_world,
                    pair.d0,
                )?;
                feedback_q = res.pose.flat_q();
            }
        }
        self.buffer.advance(feats, &feedback_q, &c);

        // (7) EMA smoothing of the emitted joints and root position
        let emitted = if self.config.ema_enabled {
            self.smooth(pose)?
        } else {
            pose
        };
        self.frame_counter += 1;
        Ok(StepOutput { frame: t, pose: emitted, sbp, proposal })
    }

    /// Selects or retires the active SBP pair for the IK write-back. A pair
    /// persists as long as both members stay active; d0 is captured once at
    /// onset from the corrected pose.
    fn update_pair(&mut self, states: &[crate::kinematics::BodyState]) {
        if let Some(p) = self.pair {
            if self.slots[p.moving].active && self.slots[p.fixed].active {
                return;
            }
            self.pair = None;
        }
        let active: Vec<usize> = (0..NUM_SBPS).filter(|&i| self.slots[i].active).collect();
        if active.len() < 2 {
            return;
        }
        let mut moving = None;
        for &slot in &self.config.chains.priority {
            if active.contains(&slot) && self.config.chains.chains[slot].is_some() {
                moving = Some(slot);
                break;
            }
        }
        let Some(moving) = moving else { return };
        // prefer the pelvis as the fixed member, else the first other slot
        let fixed = if moving != 4 && active.contains(&4) {
            4
        } else {
            match active.iter().find(|&&s| s != moving) {
                Some(&s) => s,
                None => return,
            }
        };
        let world = |slot: usize| {
            let st = &states[self.skeleton.sbp_sites[slot]];
            st.position + st.orientation * self.slots[slot].offset
        };
        self.pair = Some(PairState {
            moving,
            chain: self.config.chains.chains[moving].unwrap(),
            fixed,
            d0: world(moving) - world(fixed),
        });
    }

    fn smooth(&mut self, pose: Pose) -> Result<Pose, PipelineError> {
        let aj = self.config.ema_alpha_joints;
        let ar = self.config.ema_alpha_root;
        let sm_root = match self.ema_root {
            Some(prev) => ema_vec3(&prev, &pose.root_position, ar),
            None => pose.root_position,
        };
        self.ema_root = Some(sm_root);
        let sm_q: Vec<Rot6> = match &self.ema_q {
            Some(prev) => prev
                .iter()
                .zip(&pose.joint_rotations)
                .map(|(p, v)| ema_rot6(p, v, aj))
                .collect(),
            None => pose.joint_rotations.clone(),
        };
        self.ema_q = Some(sm_q.clone());
        // re-orthonormalize the smoothed 6D for the emitted pose
        let mut out = pose;
        out.root_position = sm_root;
        for (slot, r6) in out.joint_rotations.iter_mut().zip(&sm_q) {
            let m = rot6d_to_matrix(r6)?;
            *slot = matrix_to_rot6d(&m);
        }
        Ok(out)
    }
}

/// out = alpha * value + (1 - alpha) * prev.
pub fn ema_scalar(prev: f64, value: f64, alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha <= 1.0);
    alpha * value + (1.0 - alpha) * prev
}

pub fn ema_vec3(prev: &Vector3<f64>, value: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    assert!(alpha > 0.0 && alpha <= 1.0);
    value * alpha + prev * (1.0 - alpha)
}

/// EMA on the raw 6D rotation representation; callers re-orthonormalize.
pub fn ema_rot6(prev: &Rot6, value: &Rot6, alpha: f64) -> Rot6 {
    assert!(alpha > 0.0 && alpha <= 1.0);
    std::array::from_fn(|i| alpha * value[i] + (1.0 - alpha) * prev[i])
}

/// Reconstructs the waist-IMU orientation from the row-major orientation
/// block of the feature vector (sensor slot 1).
fn waist_orientation_from_features(feats: &[f64]) -> Matrix3<f64> {
    let base = 9; // sensor slot 1
    Matrix3::new(
        feats[base], feats[base + 1], feats[base + 2],
        feats[base + 3], feats[base + 4], feats[base + 5],
        feats[base + 6], feats[base + 7], feats[base + 8],
    )
}

/// Batch replay of a recorded stream: precomputes all features, then runs
/// the same per-frame step as the streaming path.
pub fn run_batch<P: Predictor>(
    skeleton: Skeleton,
    config: PipelineConfig,
    initial_pose: &Pose,
    frames: &[ImuFrame],
    predictor: &P,
    max_window: usize,
) -> Result<Vec<StepOutput>, PipelineError> {
    let buffer = HistoryBuffer::new(max_window, &initial_pose.flat_q(), &[0.0; C_DIM]);
    let mut state = PoserState::with_window(skeleton, config, initial_pose, buffer);
    state.raw = frames.to_vec();
    let feats = crate::imu::build_features(frames);
    let mut out = Vec::with_capacity(frames.len());
    for (t, f) in feats.iter().enumerate() {
        out.push(state.step_with_features(t, &f.0, predictor)?);
    }
    Ok(out)
}
