//! Virtual IMU synthesis, acceleration preprocessing (window-11 moving
//! average plus 0.5 s integration sums) and the two-step frame calibration.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::kinematics::{
    forward_kinematics, polar_rotation, rotation_angle, MotionSequence, Skeleton, NUM_IMUS,
};

/// Centered moving-average window length, in frames.
pub const FILTER_WINDOW: usize = 11;
/// Look-ahead the filter needs during streaming: (window - 1) / 2 frames.
pub const FILTER_LOOKAHEAD: usize = FILTER_WINDOW / 2;
/// Integration-sum horizon: 0.5 s of history at 60 fps.
pub const INTEGRATION_HORIZON: usize = 30;
/// Per-frame model feature width: 54 orientation + 36 acceleration channels.
pub const FEATURE_DIM: usize = 90;

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("need at least {0} frames")]
    TooShort(usize),
    #[error("excessive motion during calibration: spread {0:.2} deg >= 5 deg")]
    ExcessiveMotion(f64),
}

/// One frame of calibrated sensor data in the user-specified global frame:
/// bone orientations and gravity-free accelerations for the six sites.
#[derive(Debug, Clone)]
pub struct ImuFrame {
    pub orientations: [Matrix3<f64>; NUM_IMUS],
    pub accelerations: [Vector3<f64>; NUM_IMUS],
}

/// Flattened per-frame model input: 6 row-major rotation matrices followed
/// by 18 filtered acceleration channels and their 18 integration sums.
#[derive(Debug, Clone)]
pub struct ImuFeatures(pub [f64; FEATURE_DIM]);

/// Rotational offsets recovered by calibration plus the constant
/// acceleration bias (nominally gravity) in the global frame.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub r_gp_gn: [Matrix3<f64>; NUM_IMUS],
    pub r_s_b: [Matrix3<f64>; NUM_IMUS],
    pub a_bias: [Vector3<f64>; NUM_IMUS],
}

impl CalibrationSet {
    pub fn identity() -> Self {
        CalibrationSet {
            r_gp_gn: [Matrix3::identity(); NUM_IMUS],
            r_s_b: [Matrix3::identity(); NUM_IMUS],
            a_bias: [Vector3::zeros(); NUM_IMUS],
        }
    }
}

/// Places virtual sensors on the flagged bodies. Orientation is the body's
/// world orientation; acceleration is the second central difference of the
/// site position, gravity-free. End frames copy their interior neighbor.
pub fn synthesize_imu(
    skeleton: &Skeleton,
    motion: &MotionSequence,
) -> Result<Vec<ImuFrame>, ImuError> {
    let n = motion.len();
    if n < 3 {
        return Err(ImuError::TooShort(3));
    }
    let dt = 1.0 / motion.frame_rate;
    let site_states: Vec<Vec<(Vector3<f64>, Matrix3<f64>)>> = motion
        .frames
        .iter()
        .map(|pose| {
            let states = forward_kinematics(skeleton, pose);
            skeleton
                .imu_sites
                .iter()
                .map(|&b| (states[b].position, states[b].orientation))
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let ti = t.clamp(1, n - 2); // interior stencil index
        let mut orientations = [Matrix3::identity(); NUM_IMUS];
        let mut accelerations = [Vector3::zeros(); NUM_IMUS];
        for s in 0..NUM_IMUS {
            orientations[s] = site_states[t][s].1;
            let p_prev = site_states[ti - 1][s].0;
            let p_mid = site_states[ti][s].0;
            let p_next = site_states[ti + 1][s].0;
            accelerations[s] = (p_next - 2.0 * p_mid + p_prev) / (dt * dt);
        }
        out.push(ImuFrame { orientations, accelerations });
    }
    Ok(out)
}

/// Centered moving average with truncated windows at the edges. Output
/// length equals input length.
pub fn moving_average_filter(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1 && window % 2 == 1, "window must be odd and >= 1");
    let half = window / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(n.saturating_sub(1));
        let mut sum = 0.0;
        for s in lo..=hi {
            sum += series[s];
        }
        out.push(sum / (hi - lo + 1) as f64);
    }
    out
}

/// Per-frame sum of the most recent `horizon` raw values (including the
/// current frame); initial frames sum the available history only.
pub fn integration_features(series: &[f64], horizon: usize) -> Vec<f64> {
    assert!(horizon >= 1);
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let lo = (t + 1).saturating_sub(horizon);
        let mut sum = 0.0;
        for s in lo..=t {
            sum += series[s];
        }
        out.push(sum);
    }
    out
}

/// Splits frames into 18 per-channel acceleration series.
fn acceleration_channels(frames: &[ImuFrame]) -> Vec<Vec<f64>> {
    let mut ch = vec![Vec::with_capacity(frames.len()); 18];
    for f in frames {
        for s in 0..NUM_IMUS {
            for axis in 0..3 {
                ch[s * 3 + axis].push(f.accelerations[s][axis]);
            }
        }
    }
    ch
}

/// Full preprocessing: flattened orientations plus filtered and integrated
/// acceleration channels, per frame.
pub fn build_features(frames: &[ImuFrame]) -> Vec<ImuFeatures> {
    let n = frames.len();
    let channels = acceleration_channels(frames);
    let filtered: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| moving_average_filter(c, FILTER_WINDOW))
        .collect();
    let sums: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| integration_features(c, INTEGRATION_HORIZON))
        .collect();

    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut feat = [0.0; FEATURE_DIM];
        let mut k = 0;
        for s in 0..NUM_IMUS {
            let m = &frames[t].orientations[s];
            for r in 0..3 {
                for c in 0..3 {
                    feat[k] = m[(r, c)];
                    k += 1;
                }
            }
        }
        for c in 0..18 {
            feat[54 + c] = filtered[c][t];
        }
        for c in 0..18 {
            feat[72 + c] = sums[c][t];
        }
        out.push(ImuFeatures(feat));
    }
    out
}

/// Features for a single frame, given every frame available so far. Uses
/// the same truncated windows and summation order as [`build_features`], so
/// a streaming consumer that calls this once per frame (with at least
/// [`FILTER_LOOKAHEAD`] frames of future context, or at end of stream)
/// produces bitwise-identical output to the batch path.
pub fn features_at(frames: &[ImuFrame], t: usize) -> ImuFeatures {
    let n = frames.len();
    assert!(t < n);
    let half = FILTER_WINDOW / 2;
    let mut feat = [0.0; FEATURE_DIM];
    let mut k = 0;
    for s in 0..NUM_IMUS {
        let m = &frames[t].orientations[s];
        for r in 0..3 {
            for c in 0..3 {
                feat[k] = m[(r, c)];
                k += 1;
            }
        }
    }
    let lo = t.saturating_sub(half);
    let hi = (t + half).min(n - 1);
    let ilo = (t + 1).saturating_sub(INTEGRATION_HORIZON);
    for s in 0..NUM_IMUS {
        for axis in 0..3 {
            let ch = s * 3 + axis;
            let mut sum = 0.0;
            for f in lo..=hi {
                sum += frames[f].accelerations[s][axis];
            }
            feat[54 + ch] = sum / (hi - lo + 1) as f64;
            let mut isum = 0.0;
            for f in ilo..=t {
                isum += frames[f].accelerations[s][axis];
            }
            feat[72 + ch] = isum;
        }
    }
    ImuFeatures(feat)
}

/// Chordal mean of a set of rotations: polar factor of the arithmetic mean.
pub fn chordal_mean(rotations: &[Matrix3<f64>]) -> Matrix3<f64> {
    let mut acc = Matrix3::zeros();
    for r in rotations {
        acc += r;
    }
    polar_rotation(&(acc / rotations.len() as f64))
}

fn rotational_spread_deg(rotations: &[Matrix3<f64>], mean: &Matrix3<f64>) -> f64 {
    rotations
        .iter()
        .map(|r| rotation_angle(&(r * mean.transpose())).to_degrees())
        .fold(0.0, f64::max)
}

/// First calibration step: sensors rest aligned with the global frame, so
/// the averaged raw reading is `R_Gn^Gp` and its transpose is returned.
pub fn calibrate_global(
    raw_still: &[Vec<Matrix3<f64>>; NUM_IMUS],
) -> Result<[Matrix3<f64>; NUM_IMUS], ImuError> {
    let mut out = [Matrix3::identity(); NUM_IMUS];
    for s in 0..NUM_IMUS {
        if raw_still[s].len() < 180 {
            return Err(ImuError::TooShort(180));
        }
        let mean = chordal_mean(&raw_still[s]);
        let spread = rotational_spread_deg(&raw_still[s], &mean);
        if spread >= 5.0 {
            return Err(ImuError::ExcessiveMotion(spread));
        }
        out[s] = mean.transpose();
    }
    Ok(out)
}

/// Second calibration step from a held T pose:
/// `R_S^B = mean(R_Gn^S0)^T R_Gn^Gp R_Gp^B0`.
pub fn calibrate_sensor_to_bone(
    raw_tpose: &[Vec<Matrix3<f64>>; NUM_IMUS],
    r_gp_gn: &[Matrix3<f64>; NUM_IMUS],
    tpose_bones: &[Matrix3<f64>; NUM_IMUS],
) -> Result<[Matrix3<f64>; NUM_IMUS], ImuError> {
    let mut out = [Matrix3::identity(); NUM_IMUS];
    for s in 0..NUM_IMUS {
        if raw_tpose[s].len() < 180 {
            return Err(ImuError::TooShort(180));
        }
        let mean = chordal_mean(&raw_tpose[s]);
        let spread = rotational_spread_deg(&raw_tpose[s], &mean);
        if spread >= 5.0 {
            return Err(ImuError::ExcessiveMotion(spread));
        }
        let r_gn_gp = r_gp_gn[s].transpose();
        out[s] = mean.transpose() * r_gn_gp * tpose_bones[s];
    }
    Ok(out)
}

/// Maps raw sensor readings to bone orientations and bias-free global
/// accelerations: `R_Gp^B = R_Gp^Gn R_Gn^S R_S^B` and
/// `a_Gp = R_Gp^Gn R_Gn^S a_S - a_bias`.
pub fn apply_calibration(
    raw_orientations: &[Matrix3<f64>; NUM_IMUS],
    raw_accelerations: &[Vector3<f64>; NUM_IMUS],
    calib: &CalibrationSet,
) -> ImuFrame {
    let mut orientations = [Matrix3::identity(); NUM_IMUS];
    let mut accelerations = [Vector3::zeros(); NUM_IMUS];
    for s in 0..NUM_IMUS {
        let sensor_in_gp = calib.r_gp_gn[s] * raw_orientations[s];
        orientations[s] = sensor_in_gp * calib.r_s_b[s];
        accelerations[s] = sensor_in_gp * raw_accelerations[s] - calib.a_bias[s];
    }
    ImuFrame { orientations, accelerations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{matrix_to_rot6d, random_rotation, Pose};
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthesize_static_pose() {
        let s = Skeleton::default_figure();
        let pose = Pose::identity(&s);
        let motion = MotionSequence::new(vec![pose; 10], s.name);
        let frames = synthesize_imu(&s, &motion).unwrap();
        for f in &frames {
            for a in &f.accelerations {
                assert_relative_eq!(*a, Vector3::zeros(), epsilon = 1e-9);
            }
            for (i, o) in f.orientations.iter().enumerate() {
                assert_relative_eq!(*o, frames[0].orientations[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn synthesize_constant_acceleration() {
        let s = Skeleton::default_figure();
        let dt = crate::DT;
        let frames: Vec<Pose> = (0..30)
            .map(|i| {
                let t = i as f64 * dt;
                let mut p = Pose::identity(&s);
                p.root_position += Vector3::new(0.5 * t * t, 0.0, 0.0);
                p
            })
            .collect();
        let motion = MotionSequence::new(frames, s.name);
        let imu = synthesize_imu(&s, &motion).unwrap();
        for f in &imu {
            for a in &f.accelerations {
                assert!((a - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn synthesize_sinusoidal_bounce() {
        let s = Skeleton::default_figure();
        let dt = crate::DT;
        let n = 240;
        let frames: Vec<Pose> = (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                let mut p = Pose::identity(&s);
                p.root_position += Vector3::new(0.0, 0.0, 0.1 * (std::f64::consts::TAU * t).sin());
                p
            })
            .collect();
        let motion = MotionSequence::new(frames, s.name);
        let imu = synthesize_imu(&s, &motion).unwrap();
        let w = std::f64::consts::TAU;
        for (i, f) in imu.iter().enumerate().skip(1).take(n - 2) {
            let t = i as f64 * dt;
            let expect = -0.1 * w * w * (w * t).sin();
            let got = f.accelerations[0].z; // head channel
            assert!(
                (got - expect).abs() <= 0.02 * 0.1 * w * w,
                "t={t} got={got} expect={expect}"
            );
        }
    }

    #[test]
    fn filter_preserves_constants() {
        let series = vec![3.25; 100];
        let out = moving_average_filter(&series, FILTER_WINDOW);
        for v in out {
            assert_relative_eq!(v, 3.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn filter_impulse_response() {
        let mut series = vec![0.0; 200];
        series[100] = 1.0;
        let out = moving_average_filter(&series, 11);
        for (t, v) in out.iter().enumerate() {
            if (95..=105).contains(&t) {
                assert_relative_eq!(*v, 1.0 / 11.0, epsilon = 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn filter_variance_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let series: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let out = moving_average_filter(&series, 11);
        let ratio = var(&out[5..n - 5]) / var(&series);
        assert!((ratio - 1.0 / 11.0).abs() < 0.15 / 11.0, "ratio={ratio}");
    }

    #[test]
    fn integration_zero_and_constant() {
        let zeros = vec![0.0; 50];
        assert!(integration_features(&zeros, 30).iter().all(|v| *v == 0.0));
        let ones = vec![2.0; 100];
        let out = integration_features(&ones, 30);
        assert_relative_eq!(out[99], 60.0, epsilon = 1e-12);
        assert_relative_eq!(out[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn integration_ramp_closed_form() {
        let ramp: Vec<f64> = (0..200).map(|t| t as f64).collect();
        let out = integration_features(&ramp, 30);
        for t in 29..200 {
            let expect = 30.0 * t as f64 - 435.0;
            assert_relative_eq!(out[t], expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn features_have_fixed_dimension() {
        let s = Skeleton::default_figure();
        let motion = MotionSequence::new(vec![Pose::identity(&s); 40], s.name);
        let imu = synthesize_imu(&s, &motion).unwrap();
        let feats = build_features(&imu);
        assert_eq!(feats.len(), 40);
        assert_eq!(feats[0].0.len(), 90);
    }

    #[test]
    fn per_frame_features_match_batch_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 50;
        let frames: Vec<ImuFrame> = (0..n)
            .map(|_| ImuFrame {
                orientations: std::array::from_fn(|_| random_rotation(&mut rng)),
                accelerations: std::array::from_fn(|_| {
                    Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>())
                }),
            })
            .collect();
        let batch = build_features(&frames);
        for t in 0..n {
            let single = features_at(&frames, t);
            assert_eq!(single.0, batch[t].0, "frame {t} differs");
        }
    }

    #[test]
    fn preprocessing_shift_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let series: Vec<f64> = (0..300).map(|_| rng.gen::<f64>()).collect();
        let k = 17;
        let shifted: Vec<f64> = series[k..].to_vec();
        let a = moving_average_filter(&series, 11);
        let b = moving_average_filter(&shifted, 11);
        // interior region away from either edge
        for t in 40..200 {
            assert_eq!(a[t + k], b[t]);
        }
        let ia = integration_features(&series, 30);
        let ib = integration_features(&shifted, 30);
        for t in 40..200 {
            assert_relative_eq!(ia[t + k], ib[t], epsilon = 1e-12);
        }
    }

    #[test]
    fn calibrate_global_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng);
        let raw: [Vec<Matrix3<f64>>; NUM_IMUS] = std::array::from_fn(|_| vec![r; 180]);
        let out = calibrate_global(&raw).unwrap();
        for s in 0..NUM_IMUS {
            assert!((out[s] - r.transpose()).norm() < 1e-12);
        }
        let ident: [Vec<Matrix3<f64>>; NUM_IMUS] =
            std::array::from_fn(|_| vec![Matrix3::identity(); 180]);
        let out = calibrate_global(&ident).unwrap();
        for s in 0..NUM_IMUS {
            assert!((out[s] - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn calibrate_global_rejects_motion() {
        let mut raw: [Vec<Matrix3<f64>>; NUM_IMUS] =
            std::array::from_fn(|_| vec![Matrix3::identity(); 180]);
        let big = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.2).into_inner();
        raw[2][50] = big;
        assert!(matches!(
            calibrate_global(&raw),
            Err(ImuError::ExcessiveMotion(_))
        ));
    }

    #[test]
    fn calibrate_global_noise_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r = random_rotation(&mut rng);
        let sigma = 1f64.to_radians();
        let raw: [Vec<Matrix3<f64>>; NUM_IMUS] = std::array::from_fn(|_| {
            (0..180)
                .map(|_| {
                    let ax = Vector3::new(
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    );
                    let noise = Rotation3::from_axis_angle(
                        &nalgebra::Unit::new_normalize(ax),
                        sigma * (rng.gen::<f64>() * 2.0 - 1.0),
                    );
                    noise.into_inner() * r
                })
                .collect()
        });
        let out = calibrate_global(&raw).unwrap();
        for s in 0..NUM_IMUS {
            let err = rotation_angle(&(out[s] * r)).to_degrees();
            assert!(err < 0.5, "err={err}");
        }
    }

    #[test]
    fn apply_calibration_gravity_removal() {
        let mut calib = CalibrationSet::identity();
        calib.a_bias = [Vector3::new(0.0, 0.0, 9.81); NUM_IMUS];
        let raw_r = [Matrix3::identity(); NUM_IMUS];
        let raw_a = [Vector3::new(0.0, 0.0, 9.81); NUM_IMUS];
        let frame = apply_calibration(&raw_r, &raw_a, &calib);
        for a in &frame.accelerations {
            assert_relative_eq!(*a, Vector3::zeros(), epsilon = 1e-12);
        }
    }

    #[test]
    fn apply_calibration_sensor_at_gp() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut calib = CalibrationSet::identity();
        for s in 0..NUM_IMUS {
            calib.r_gp_gn[s] = random_rotation(&mut rng);
        }
        let raw_r: [Matrix3<f64>; NUM_IMUS] =
            std::array::from_fn(|s| calib.r_gp_gn[s].transpose());
        let raw_a = [Vector3::zeros(); NUM_IMUS];
        let frame = apply_calibration(&raw_r, &raw_a, &calib);
        for o in &frame.orientations {
            assert!((o - Matrix3::identity()).norm() < 1e-12);
        }
    }

    /// Synthesize, corrupt with a random fixed calibration, then recover it
    /// through the two-step procedure and apply it back.
    #[test]
    fn calibration_roundtrip_exact() {
        let s = Skeleton::default_figure();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dt = crate::DT;
        let frames: Vec<Pose> = (0..60)
            .map(|i| {
                let t = i as f64 * dt;
                let mut p = Pose::identity(&s);
                p.root_position += Vector3::new(0.2 * t * t, 0.1 * t, 0.0);
                let m = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.3 * t).into_inner();
                p.joint_rotations[0] = matrix_to_rot6d(&m);
                p
            })
            .collect();
        let motion = MotionSequence::new(frames, s.name);
        let truth = synthesize_imu(&s, &motion).unwrap();

        let gravity = Vector3::new(0.0, 0.0, 9.81);
        let r_gp_gn: [Matrix3<f64>; NUM_IMUS] = std::array::from_fn(|_| random_rotation(&mut rng));
        let r_s_b: [Matrix3<f64>; NUM_IMUS] = std::array::from_fn(|_| random_rotation(&mut rng));

        // forward-simulate the calibration captures
        let raw_still: [Vec<Matrix3<f64>>; NUM_IMUS] =
            std::array::from_fn(|s| vec![r_gp_gn[s].transpose(); 180]);
        let tpose = Pose::identity(&s);
        let tpose_states = forward_kinematics(&s, &tpose);
        let tpose_bones: [Matrix3<f64>; NUM_IMUS] =
            std::array::from_fn(|i| tpose_states[s.imu_sites[i]].orientation);
        let raw_tpose: [Vec<Matrix3<f64>>; NUM_IMUS] = std::array::from_fn(|i| {
            vec![r_gp_gn[i].transpose() * tpose_bones[i] * r_s_b[i].transpose(); 180]
        });

        let rec_gp_gn = calibrate_global(&raw_still).unwrap();
        let rec_s_b = calibrate_sensor_to_bone(&raw_tpose, &rec_gp_gn, &tpose_bones).unwrap();
        for i in 0..NUM_IMUS {
            assert!(rotation_angle(&(rec_gp_gn[i] * r_gp_gn[i].transpose())) < 1e-6);
            assert!(rotation_angle(&(rec_s_b[i] * r_s_b[i].transpose())) < 1e-6);
        }

        let calib = CalibrationSet { r_gp_gn: rec_gp_gn, r_s_b: rec_s_b, a_bias: [gravity; NUM_IMUS] };
        for f in &truth {
            // invert the calibration relations to produce raw readings
            let raw_r: [Matrix3<f64>; NUM_IMUS] = std::array::from_fn(|i| {
                r_gp_gn[i].transpose() * f.orientations[i] * r_s_b[i].transpose()
            });
            let raw_a: [Vector3<f64>; NUM_IMUS] = std::array::from_fn(|i| {
                (r_gp_gn[i] * raw_r[i]).transpose() * (f.accelerations[i] + gravity)
            });
            let rec = apply_calibration(&raw_r, &raw_a, &calib);
            for i in 0..NUM_IMUS {
                assert!((rec.orientations[i] - f.orientations[i]).norm() < 1e-9);
                assert!((rec.accelerations[i] - f.accelerations[i]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn calibrate_sensor_to_bone_axis_case() {
        // sensor rotated 90 degrees about the bone x axis, identity elsewhere
        let rx90 = Rotation3::from_axis_angle(&Vector3::x_axis(), 90f64.to_radians()).into_inner();
        let r_gp_gn = [Matrix3::identity(); NUM_IMUS];
        let bones = [Matrix3::identity(); NUM_IMUS];
        // R_Gn^S0 = R_Gn^Gp R_Gp^B0 (R_S^B)^T = rx90^T
        let raw: [Vec<Matrix3<f64>>; NUM_IMUS] =
            std::array::from_fn(|_| vec![rx90.transpose(); 180]);
        let out = calibrate_sensor_to_bone(&raw, &r_gp_gn, &bones).unwrap();
        for s in 0..NUM_IMUS {
            assert!((out[s] - rx90).norm() < 1e-6);
        }
    }
}
