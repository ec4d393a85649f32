//! Line-oriented text formats for motions, IMU streams, SBP labels,
//! calibration sets, terrain exports, model checkpoints and run manifests.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is bitwise lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::imu::{CalibrationSet, ImuFrame};
use crate::kinematics::{MotionSequence, Pose, NUM_IMUS};
use crate::model::{Layout, ModelConfig, ModelParams};
use crate::sbp::SbpFrame;
use crate::terrain::TerrainState;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad format: {0}")]
    Format(String),
}

fn bad(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

fn parse_f64(tok: &str) -> Result<f64, IoError> {
    tok.parse::<f64>().map_err(|_| bad(format!("bad number `{tok}`")))
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

fn write_mat3(out: &mut String, m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            write!(out, " {}", m[(r, c)]).unwrap();
        }
    }
}

fn read_mat3(toks: &[&str]) -> Result<Matrix3<f64>, IoError> {
    let mut v = [0.0; 9];
    for (slot, tok) in v.iter_mut().zip(toks) {
        *slot = parse_f64(tok)?;
    }
    Ok(Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]))
}

// --- motion: `# tipmotion v1 fps=60 skeleton=<name>` -----------------------

pub fn write_motion(path: &Path, motion: &MotionSequence) -> Result<(), IoError> {
    let mut out = String::new();
    writeln!(
        out,
        "# tipmotion v1 fps={} skeleton={}",
        motion.frame_rate, motion.skeleton_name
    )
    .unwrap();
    for (t, pose) in motion.frames.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for i in 0..3 {
            write!(out, " {}", pose.root_position[i]).unwrap();
        }
        write_mat3(&mut out, &pose.root_orientation);
        for q in pose.flat_q() {
            write!(out, " {q}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_motion(path: &Path) -> Result<MotionSequence, IoError> {
    let text = fs::read_to_string(path)?;
    let header = text
        .lines()
        .next()
        .ok_or_else(|| bad("empty motion file"))?;
    if !header.starts_with("# tipmotion v1") {
        return Err(bad("missing tipmotion v1 header"));
    }
    let fps = header
        .split_whitespace()
        .find_map(|t| t.strip_prefix("fps="))
        .ok_or_else(|| bad("missing fps"))
        .and_then(parse_f64)?;
    let skeleton_name = header
        .split_whitespace()
        .find_map(|t| t.strip_prefix("skeleton="))
        .ok_or_else(|| bad("missing skeleton name"))?
        .to_string();
    let mut frames = Vec::new();
    for line in data_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 1 + 3 + 9 + 108 {
            return Err(bad(format!("motion line has {} fields, want 121", toks.len())));
        }
        let root_position = Vector3::new(
            parse_f64(toks[1])?,
            parse_f64(toks[2])?,
            parse_f64(toks[3])?,
        );
        let root_orientation = read_mat3(&toks[4..13])?;
        let mut q = Vec::with_capacity(108);
        for tok in &toks[13..] {
            q.push(parse_f64(tok)?);
        }
        let mut pose = Pose {
            root_position,
            root_orientation,
            joint_rotations: vec![crate::kinematics::IDENTITY_ROT6; 18],
        };
        pose.set_flat_q(&q);
        frames.push(pose);
    }
    Ok(MotionSequence {
        frame_rate: fps,
        frames,
        root_velocities: None,
        skeleton_name,
    })
}

// --- IMU stream: `# tipimu v1 fps=60` --------------------------------------

pub fn write_imu(path: &Path, frames: &[ImuFrame], fps: f64) -> Result<(), IoError> {
    let mut out = String::new();
    writeln!(out, "# tipimu v1 fps={fps}").unwrap();
    for (t, f) in frames.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for s in 0..NUM_IMUS {
            write_mat3(&mut out, &f.orientations[s]);
        }
        for s in 0..NUM_IMUS {
            for i in 0..3 {
                write!(out, " {}", f.accelerations[s][i]).unwrap();
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_imu(path: &Path) -> Result<(Vec<ImuFrame>, f64), IoError> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().ok_or_else(|| bad("empty imu file"))?;
    if !header.starts_with("# tipimu v1") {
        return Err(bad("missing tipimu v1 header"));
    }
    let fps = header
        .split_whitespace()
        .find_map(|t| t.strip_prefix("fps="))
        .ok_or_else(|| bad("missing fps"))
        .and_then(parse_f64)?;
    let mut frames = Vec::new();
    for line in data_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 1 + 54 + 18 {
            return Err(bad(format!("imu line has {} fields, want 73", toks.len())));
        }
        let mut orientations = [Matrix3::identity(); NUM_IMUS];
        let mut accelerations = [Vector3::zeros(); NUM_IMUS];
        for s in 0..NUM_IMUS {
            orientations[s] = read_mat3(&toks[1 + 9 * s..1 + 9 * (s + 1)])?;
        }
        for s in 0..NUM_IMUS {
            let base = 55 + 3 * s;
            accelerations[s] = Vector3::new(
                parse_f64(toks[base])?,
                parse_f64(toks[base + 1])?,
                parse_f64(toks[base + 2])?,
            );
        }
        frames.push(ImuFrame { orientations, accelerations });
    }
    Ok((frames, fps))
}

// --- SBP labels: `# tipsbp v1` ----------------------------------------------

pub fn write_sbp(path: &Path, frames: &[SbpFrame]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("# tipsbp v1\n");
    for (t, f) in frames.iter().enumerate() {
        write!(out, "{t}").unwrap();
        for v in f.to_flat() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sbp(path: &Path) -> Result<Vec<SbpFrame>, IoError> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().ok_or_else(|| bad("empty sbp file"))?;
    if !header.starts_with("# tipsbp v1") {
        return Err(bad("missing tipsbp v1 header"));
    }
    let mut frames = Vec::new();
    for line in data_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 21 {
            return Err(bad(format!("sbp line has {} fields, want 21", toks.len())));
        }
        let mut flat = [0.0; 20];
        for (slot, tok) in flat.iter_mut().zip(&toks[1..]) {
            *slot = parse_f64(tok)?;
        }
        frames.push(SbpFrame::from_flat(&flat));
    }
    Ok(frames)
}

// --- calibration: 6 blocks `sensor_id R_GpGn[9] R_SB[9] bias[3]` ------------

pub fn write_calibration(path: &Path, cal: &CalibrationSet) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("# tipcalib v1\n");
    for s in 0..NUM_IMUS {
        write!(out, "{s}").unwrap();
        write_mat3(&mut out, &cal.r_gp_gn[s]);
        write_mat3(&mut out, &cal.r_s_b[s]);
        for i in 0..3 {
            write!(out, " {}", cal.a_bias[s][i]).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationSet, IoError> {
    let text = fs::read_to_string(path)?;
    let mut cal = CalibrationSet::identity();
    let mut seen = [false; NUM_IMUS];
    for line in data_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 1 + 9 + 9 + 3 {
            return Err(bad(format!("calibration line has {} fields, want 22", toks.len())));
        }
        let id: usize = toks[0]
            .parse()
            .map_err(|_| bad(format!("bad sensor id `{}`", toks[0])))?;
        if id >= NUM_IMUS {
            return Err(bad(format!("sensor id {id} out of range")));
        }
        cal.r_gp_gn[id] = read_mat3(&toks[1..10])?;
        cal.r_s_b[id] = read_mat3(&toks[10..19])?;
        cal.a_bias[id] = Vector3::new(
            parse_f64(toks[19])?,
            parse_f64(toks[20])?,
            parse_f64(toks[21])?,
        );
        seen[id] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(bad("calibration file missing sensors"));
    }
    Ok(cal)
}

// --- terrain: `# tipterrain v1 grid=<g> origin_x origin_y L` -----------------

pub fn write_terrain(path: &Path, state: &TerrainState) -> Result<(), IoError> {
    let mut out = String::new();
    writeln!(
        out,
        "# tipterrain v1 grid={} {} {} {}",
        state.config.grid_size, state.origin.x, state.origin.y, state.l
    )
    .unwrap();
    let h = state.height_map();
    for row in 0..state.l {
        let mut line = String::new();
        for col in 0..state.l {
            if col > 0 {
                line.push(' ');
            }
            write!(line, "{}", h[row * state.l + col]).unwrap();
        }
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Confidence companion export (same layout, C values; +inf as `inf`).
pub fn write_terrain_confidence(path: &Path, state: &TerrainState) -> Result<(), IoError> {
    let mut out = String::new();
    writeln!(
        out,
        "# tipterrain v1 grid={} {} {} {}",
        state.config.grid_size, state.origin.x, state.origin.y, state.l
    )
    .unwrap();
    let c = state.confidence_map();
    for row in 0..state.l {
        for col in 0..state.l {
            if col > 0 {
                out.push(' ');
            }
            let v = c[row * state.l + col];
            if v.is_finite() {
                write!(out, "{v}").unwrap();
            } else {
                out.push_str("inf");
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parsed terrain export: header fields plus the raw height grid.
pub struct TerrainGrid {
    pub grid_size: f64,
    pub origin: (f64, f64),
    pub l: usize,
    pub heights: Vec<f64>,
}

pub fn read_terrain(path: &Path) -> Result<TerrainGrid, IoError> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().ok_or_else(|| bad("empty terrain file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 7 || toks[0] != "#" || toks[1] != "tipterrain" || toks[2] != "v1" {
        return Err(bad("missing tipterrain v1 header"));
    }
    let grid_size = toks[3]
        .strip_prefix("grid=")
        .ok_or_else(|| bad("missing grid="))
        .and_then(parse_f64)?;
    let origin = (parse_f64(toks[4])?, parse_f64(toks[5])?);
    let l: usize = toks[6].parse().map_err(|_| bad("bad grid dimension"))?;
    let mut heights = Vec::with_capacity(l * l);
    for line in data_lines(&text) {
        for tok in line.split_whitespace() {
            heights.push(parse_f64(tok)?);
        }
    }
    if heights.len() != l * l {
        return Err(bad(format!(
            "terrain grid has {} values, want {}",
            heights.len(),
            l * l
        )));
    }
    Ok(TerrainGrid { grid_size, origin, l, heights })
}

// --- model checkpoint: `tipmodel v1` -----------------------------------------

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<(), IoError> {
    let c = &params.config;
    let mut out = String::new();
    out.push_str("tipmodel v1\n");
    writeln!(
        out,
        "config max_window={} embed_dim={} n_layers={} n_heads={} ff_dim={} summarizer_width={} history_dropout={}",
        c.max_window, c.embed_dim, c.n_layers, c.n_heads, c.ff_dim, c.summarizer_width, c.history_dropout
    )
    .unwrap();
    for sp in &params.layout.specs {
        write!(out, "tensor {} {} {}", sp.name, sp.rows, sp.cols).unwrap();
        for v in &params.data[sp.offset..sp.offset + sp.rows * sp.cols] {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams, IoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("tipmodel v1") => {}
        _ => return Err(bad("missing tipmodel v1 header")),
    }
    let config_line = lines.next().ok_or_else(|| bad("missing config block"))?;
    let mut kv = BTreeMap::new();
    let mut parts = config_line.split_whitespace();
    if parts.next() != Some("config") {
        return Err(bad("missing config block"));
    }
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("bad config field `{part}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get_usize = |k: &str| -> Result<usize, IoError> {
        kv.get(k)
            .ok_or_else(|| bad(format!("missing config key {k}")))?
            .parse()
            .map_err(|_| bad(format!("bad config value for {k}")))
    };
    let config = ModelConfig {
        max_window: get_usize("max_window")?,
        embed_dim: get_usize("embed_dim")?,
        n_layers: get_usize("n_layers")?,
        n_heads: get_usize("n_heads")?,
        ff_dim: get_usize("ff_dim")?,
        summarizer_width: get_usize("summarizer_width")?,
        history_dropout: kv
            .get("history_dropout")
            .ok_or_else(|| bad("missing history_dropout"))
            .and_then(|v| parse_f64(v))?,
    };
    config
        .validate()
        .map_err(|e| bad(format!("bad checkpoint config: {e}")))?;
    let layout = Layout::new(&config);
    let mut data = vec![0.0; layout.total];
    let mut filled = vec![false; layout.specs.len()];
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks[0] != "tensor" || toks.len() < 4 {
            return Err(bad(format!("bad tensor line `{}`", &line[..line.len().min(40)])));
        }
        let name = toks[1];
        let rows: usize = toks[2].parse().map_err(|_| bad("bad tensor rows"))?;
        let cols: usize = toks[3].parse().map_err(|_| bad("bad tensor cols"))?;
        let idx = layout
            .specs
            .iter()
            .position(|sp| sp.name == name)
            .ok_or_else(|| bad(format!("unknown tensor `{name}`")))?;
        let sp = &layout.specs[idx];
        if sp.rows != rows || sp.cols != cols || toks.len() != 4 + rows * cols {
            return Err(bad(format!("tensor `{name}` shape mismatch")));
        }
        for (slot, tok) in data[sp.offset..sp.offset + rows * cols]
            .iter_mut()
            .zip(&toks[4..])
        {
            *slot = parse_f64(tok)?;
        }
        filled[idx] = true;
    }
    if filled.iter().any(|f| !f) {
        return Err(bad("checkpoint missing tensors"));
    }
    Ok(ModelParams { config, layout, data })
}

// --- manifest: key = value ----------------------------------------------------

pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<(), IoError> {
    let mut out = String::new();
    for (k, v) in entries {
        writeln!(out, "{k} = {v}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in data_lines(&text) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("manifest line without `=`: {line}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{random_rotation, Skeleton};
    use crate::model::ModelConfig;
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tip-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn motion_roundtrip_bitwise() {
        let s = Skeleton::default_figure();
        let motion = synth::walk(&s, 30, 0.5);
        let path = tmp("walk.motion");
        write_motion(&path, &motion).unwrap();
        let back = read_motion(&path).unwrap();
        assert_eq!(back.frame_rate, motion.frame_rate);
        assert_eq!(back.skeleton_name, motion.skeleton_name);
        assert_eq!(back.frames.len(), motion.frames.len());
        for (a, b) in back.frames.iter().zip(&motion.frames) {
            assert_eq!(a.root_position, b.root_position);
            assert_eq!(a.root_orientation, b.root_orientation);
            assert_eq!(a.joint_rotations, b.joint_rotations);
        }
    }

    #[test]
    fn imu_roundtrip_bitwise() {
        let s = Skeleton::default_figure();
        let motion = synth::walk(&s, 20, 0.4);
        let frames = crate::imu::synthesize_imu(&s, &motion).unwrap();
        let path = tmp("walk.imu");
        write_imu(&path, &frames, 60.0).unwrap();
        let (back, fps) = read_imu(&path).unwrap();
        assert_eq!(fps, 60.0);
        assert_eq!(back.len(), frames.len());
        for (a, b) in back.iter().zip(&frames) {
            assert_eq!(a.orientations, b.orientations);
            assert_eq!(a.accelerations, b.accelerations);
        }
    }

    #[test]
    fn sbp_roundtrip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<SbpFrame> = (0..10)
            .map(|_| {
                let flat: [f64; 20] =
                    std::array::from_fn(|i| if i % 4 == 0 { 1.0 } else { rng.gen::<f64>() - 0.5 });
                SbpFrame::from_flat(&flat)
            })
            .collect();
        let path = tmp("labels.sbp");
        write_sbp(&path, &frames).unwrap();
        let back = read_sbp(&path).unwrap();
        for (a, b) in back.iter().zip(&frames) {
            assert_eq!(a.to_flat(), b.to_flat());
        }
    }

    #[test]
    fn calibration_roundtrip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cal = CalibrationSet::identity();
        for s in 0..NUM_IMUS {
            cal.r_gp_gn[s] = random_rotation(&mut rng);
            cal.r_s_b[s] = random_rotation(&mut rng);
            cal.a_bias[s] = Vector3::new(rng.gen(), rng.gen(), rng.gen());
        }
        let path = tmp("sensors.calib");
        write_calibration(&path, &cal).unwrap();
        let back = read_calibration(&path).unwrap();
        for s in 0..NUM_IMUS {
            assert_eq!(back.r_gp_gn[s], cal.r_gp_gn[s]);
            assert_eq!(back.r_s_b[s], cal.r_s_b[s]);
            assert_eq!(back.a_bias[s], cal.a_bias[s]);
        }
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(ModelConfig::micro(), &mut rng).unwrap();
        let path = tmp("toy.tipmodel");
        write_checkpoint(&path, &params).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.config, params.config);
        assert_eq!(back.data, params.data);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(ModelConfig::micro(), &mut rng).unwrap();
        let path = tmp("corrupt.tipmodel");
        write_checkpoint(&path, &params).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        fs::write(&path, truncated).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let mut m = BTreeMap::new();
        m.insert("seed".to_string(), "42".to_string());
        m.insert("input.sha256".to_string(), "abc123".to_string());
        let path = tmp("run.manifest");
        write_manifest(&path, &m).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn terrain_export_header_and_grid() {
        use crate::terrain::TerrainConfig;
        let mut cfg = TerrainConfig::default();
        cfg.extent = 2.0; // small grid for the test
        let state = TerrainState::new(cfg, Vector3::new(0.0, 0.0, 0.9));
        let path = tmp("flat.terrain");
        write_terrain(&path, &state).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("# tipterrain v1 grid=0.1"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 20);
        assert_eq!(rows[0].split_whitespace().count(), 20);
        // empty state exports the datum floor everywhere
        let v: f64 = rows[0].split_whitespace().next().unwrap().parse().unwrap();
        assert!((v - (0.9 - 0.05)).abs() < 1e-12);
    }
}
