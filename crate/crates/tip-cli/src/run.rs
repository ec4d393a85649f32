//! Subcommand implementations. Every run writes a manifest (full config,
//! input hashes, crate version) next to its primary output; partial outputs
//! are removed on error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use tip_core::eval::{evaluate, WindowMode};
use tip_core::imu::{
    apply_calibration, build_features, calibrate_global, calibrate_sensor_to_bone, synthesize_imu,
    CalibrationSet, ImuFrame,
};
use tip_core::kinematics::{
    forward_kinematics, MotionSequence, Skeleton, L_ANKLE, NUM_IMUS, R_ANKLE,
};
use tip_core::model::{
    make_windows, train, ModelConfig, ModelError, ModelParams, TrainOptions, C_DIM,
};
use tip_core::pipeline::{PipelineConfig, PoserState};
use tip_core::sbp::{label_motion, SbpFrame, SbpSearchGrid};
use tip_core::terrain::{SbpObservation, TerrainConfig, TerrainSource, TerrainState};
use tip_core::io;

// --- errors mapped to exit codes ---------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Exit 2: bad invocation or configuration.
    Usage(String),
    /// Exit 3: malformed or inconsistent input data.
    Data(String),
    /// Exit 4: numeric failure (divergence, non-finite values).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numeric(m) => write!(f, "numeric: {m}"),
        }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite | ModelError::Divergence(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data_err(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

// --- argument surface ---------------------------------------------------------

#[derive(Parser)]
#[command(name = "tip", version, about = "Sparse-IMU full-body motion reconstruction")]
pub struct Cli {
    /// Optional key = value config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Builtin {
    Walk,
    Stand,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Arch {
    Default,
    Tiny,
    Micro,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EvalMode {
    Strided,
    Random,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Synthesize an IMU stream (and optionally the motion) from a motion
    /// file or a built-in generator.
    Synth(SynthArgs),
    /// Label a motion file with ground-truth stationary body points.
    LabelSbp(LabelArgs),
    /// Train a model on a directory (or single file) of motion data.
    Train(TrainArgs),
    /// Reconstruct motion from an IMU stream with a trained model.
    Infer(InferArgs),
    /// Compare a reconstruction against ground truth.
    Eval(EvalArgs),
    /// Rebuild and export the terrain implied by a labeled motion.
    ExportTerrain(ExportTerrainArgs),
    /// Two-step sensor calibration from still and T-pose raw streams.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Source motion file; mutually exclusive with --builtin.
    #[arg(long)]
    motion: Option<PathBuf>,
    /// Built-in generator to use instead of a motion file.
    #[arg(long, value_enum)]
    builtin: Option<Builtin>,
    #[arg(long, default_value_t = 600)]
    frames: usize,
    /// Walking speed for the built-in walk (m/s).
    #[arg(long, default_value_t = 0.5)]
    speed: f64,
    /// Gaussian acceleration noise std-dev (m/s^2).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output IMU stream path.
    #[arg(long)]
    out: PathBuf,
    /// Also save the source motion (for built-ins).
    #[arg(long)]
    save_motion: Option<PathBuf>,
}

#[derive(Args)]
pub struct LabelArgs {
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of .motion files, or a single motion file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::Tiny)]
    arch: Arch,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop early when the epoch loss falls below this.
    #[arg(long)]
    target_loss: Option<f64>,
    /// Loss curve output (defaults to <out>.loss.txt).
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    imu: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Motion file whose first frame is the calibration-time initial pose.
    #[arg(long)]
    initial_pose: PathBuf,
    /// Optional calibration file applied to the raw stream.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Disable the EMA output filter.
    #[arg(long, default_value_t = false)]
    no_ema: bool,
    /// Output prefix: writes <prefix>.motion, <prefix>.sbp, <prefix>.terrain.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Strided)]
    mode: EvalMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportTerrainArgs {
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    sbp: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional inverse-confidence map export.
    #[arg(long)]
    confidence: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Raw IMU stream captured standing still.
    #[arg(long)]
    still: PathBuf,
    /// Raw IMU stream captured holding a T pose.
    #[arg(long)]
    tpose: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

// --- config file --------------------------------------------------------------

/// Optional key = value overrides; unknown keys are rejected.
#[derive(Default, Clone)]
struct FileConfig {
    entries: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "max_window",
    "history_dropout",
    "terrain.k",
    "terrain.w",
    "terrain.grid_size",
    "ema.alpha_joints",
    "ema.alpha_root",
];

impl FileConfig {
    fn load(path: &Path) -> Result<Self, CliError> {
        let map = io::read_manifest(path)?;
        for k in map.keys() {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(CliError::Usage(format!("unknown config key `{k}`")));
            }
        }
        Ok(FileConfig { entries: map })
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("bad config value for {key}: {v}")))
            })
            .transpose()
    }

    fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = PipelineConfig::default();
        if let Some(v) = self.f64("terrain.k")? {
            cfg.terrain.k = v;
        }
        if let Some(v) = self.f64("terrain.w")? {
            cfg.terrain.w = v;
        }
        if let Some(v) = self.f64("terrain.grid_size")? {
            cfg.terrain.grid_size = v;
        }
        if let Some(v) = self.f64("ema.alpha_joints")? {
            cfg.ema_alpha_joints = v;
        }
        if let Some(v) = self.f64("ema.alpha_root")? {
            cfg.ema_alpha_root = v;
        }
        Ok(cfg)
    }
}

// --- manifest + output tracking ------------------------------------------------

struct Outputs {
    created: Vec<PathBuf>,
    manifest: BTreeMap<String, String>,
    manifest_path: PathBuf,
}

impl Outputs {
    fn new(primary: &Path, command: &str, file_config: &FileConfig) -> Self {
        let mut manifest = BTreeMap::new();
        manifest.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        manifest.insert("command".into(), command.into());
        for (k, v) in &file_config.entries {
            manifest.insert(format!("config.{k}"), v.clone());
        }
        let manifest_path = primary.with_extension(format!(
            "{}manifest",
            primary
                .extension()
                .map(|e| format!("{}.", e.to_string_lossy()))
                .unwrap_or_default()
        ));
        Outputs { created: Vec::new(), manifest, manifest_path }
    }

    fn arg(&mut self, key: &str, value: impl fmt::Display) {
        self.manifest.insert(format!("arg.{key}"), value.to_string());
    }

    fn input(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        self.manifest.insert(format!("input.{key}.sha256"), hex);
        self.manifest
            .insert(format!("input.{key}.path"), path.display().to_string());
        Ok(())
    }

    fn track(&mut self, path: &Path) {
        self.created.push(path.to_path_buf());
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.manifest
            .insert("status".into(), "ok".into());
        io::write_manifest(&self.manifest_path, &self.manifest)?;
        Ok(())
    }

    fn abort(self) {
        for p in &self.created {
            let _ = fs::remove_file(p);
        }
        let _ = fs::remove_file(&self.manifest_path);
    }
}

fn with_outputs(
    mut outputs: Outputs,
    body: impl FnOnce(&mut Outputs) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match body(&mut outputs) {
        Ok(()) => outputs.finish(),
        Err(e) => {
            outputs.abort();
            Err(e)
        }
    }
}

// --- shared helpers -------------------------------------------------------------

fn load_motion(path: &Path, skeleton: &Skeleton) -> Result<MotionSequence, CliError> {
    let motion = io::read_motion(path)?;
    if motion.skeleton_name != skeleton.name {
        return Err(CliError::Data(format!(
            "motion skeleton `{}` does not match `{}`",
            motion.skeleton_name, skeleton.name
        )));
    }
    Ok(motion)
}

/// Root velocities from the motion itself: central differences with
/// one-sided stencils at the ends.
fn root_velocities(motion: &MotionSequence) -> Vec<[f64; 3]> {
    let n = motion.len();
    let dt = 1.0 / motion.frame_rate;
    (0..n)
        .map(|t| {
            let (a, b, span) = if t == 0 {
                (0, 1.min(n - 1), dt)
            } else if t == n - 1 {
                (n - 2, n - 1, dt)
            } else {
                (t - 1, t + 1, 2.0 * dt)
            };
            let v = (motion.frames[b].root_position - motion.frames[a].root_position) / span;
            [v.x, v.y, v.z]
        })
        .collect()
}

fn training_windows_for(
    skeleton: &Skeleton,
    motion: &MotionSequence,
    window: usize,
) -> Result<Vec<tip_core::model::TrainingWindow>, CliError> {
    let frames = synthesize_imu(skeleton, motion).map_err(data_err)?;
    let feats = build_features(&frames);
    let labels = label_motion(skeleton, motion, &SbpSearchGrid::defaults()).map_err(data_err)?;
    let q: Vec<Vec<f64>> = motion.frames.iter().map(|p| p.flat_q()).collect();
    let v = root_velocities(motion);
    let c: Vec<Vec<f64>> = labels.iter().map(|f| f.to_flat().to_vec()).collect();
    Ok(make_windows(&feats, &q, &v, &c, window, window))
}

// --- subcommands ----------------------------------------------------------------

fn cmd_synth(a: SynthArgs, file_config: &FileConfig) -> Result<(), CliError> {
    let skeleton = Skeleton::default_figure();
    let motion = match (&a.motion, a.builtin) {
        (Some(path), None) => load_motion(path, &skeleton)?,
        (None, Some(Builtin::Walk)) => tip_core::synth::walk(&skeleton, a.frames, a.speed),
        (None, Some(Builtin::Stand)) => tip_core::synth::standing(&skeleton, a.frames),
        _ => {
            return Err(CliError::Usage(
                "exactly one of --motion or --builtin is required".into(),
            ))
        }
    };
    let mut outputs = Outputs::new(&a.out, "synth", file_config);
    if let Some(path) = &a.motion {
        outputs.input("motion", path)?;
    }
    outputs.arg("frames", a.frames);
    outputs.arg("speed", a.speed);
    outputs.arg("noise", a.noise);
    outputs.arg("seed", a.seed);
    with_outputs(outputs, |outputs| {
        let mut frames = synthesize_imu(&skeleton, &motion).map_err(data_err)?;
        if a.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let gauss = |rng: &mut ChaCha8Rng| -> f64 {
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            };
            for f in &mut frames {
                for s in 0..NUM_IMUS {
                    for axis in 0..3 {
                        f.accelerations[s][axis] += a.noise * gauss(&mut rng);
                    }
                }
            }
        }
        io::write_imu(&a.out, &frames, motion.frame_rate)?;
        outputs.track(&a.out);
        if let Some(path) = &a.save_motion {
            io::write_motion(path, &motion)?;
            outputs.track(path);
        }
        Ok(())
    })
}

fn cmd_label(a: LabelArgs, file_config: &FileConfig) -> Result<(), CliError> {
    let skeleton = Skeleton::default_figure();
    let motion = load_motion(&a.motion, &skeleton)?;
    let mut outputs = Outputs::new(&a.out, "label-sbp", file_config);
    outputs.input("motion", &a.motion)?;
    with_outputs(outputs, |outputs| {
        let labels =
            label_motion(&skeleton, &motion, &SbpSearchGrid::defaults()).map_err(data_err)?;
        io::write_sbp(&a.out, &labels)?;
        outputs.track(&a.out);
        Ok(())
    })
}

fn cmd_train(a: TrainArgs, file_config: &FileConfig) -> Result<(), CliError> {
    let skeleton = Skeleton::default_figure();
    let mut config = match a.arch {
        Arch::Default => ModelConfig::default(),
        Arch::Tiny => ModelConfig::tiny(),
        Arch::Micro => ModelConfig::micro(),
    };
    if let Some(v) = file_config.f64("max_window")? {
        config.max_window = v as usize;
    }
    if let Some(v) = file_config.f64("history_dropout")? {
        config.history_dropout = v;
    }
    let motion_paths: Vec<PathBuf> = if a.data.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&a.data)
            .map_err(|e| CliError::Data(format!("{}: {e}", a.data.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "motion"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(CliError::Data(format!(
                "no .motion files in {}",
                a.data.display()
            )));
        }
        paths
    } else {
        vec![a.data.clone()]
    };

    let loss_log = a
        .loss_log
        .clone()
        .unwrap_or_else(|| a.out.with_extension("loss.txt"));
    let mut outputs = Outputs::new(&a.out, "train", file_config);
    for (i, p) in motion_paths.iter().enumerate() {
        outputs.input(&format!("motion{i}"), p)?;
    }
    outputs.arg("epochs", a.epochs);
    outputs.arg("batch", a.batch);
    outputs.arg("lr", a.lr);
    outputs.arg("seed", a.seed);
    with_outputs(outputs, |outputs| {
        let mut windows = Vec::new();
        for p in &motion_paths {
            let motion = load_motion(p, &skeleton)?;
            windows.extend(training_windows_for(&skeleton, &motion, config.max_window + 1)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut params = ModelParams::init(config.clone(), &mut rng)?;
        let options = TrainOptions {
            epochs: a.epochs,
            batch_size: a.batch,
            learning_rate: a.lr,
            seed: a.seed,
            target_loss: a.target_loss,
        };
        let report = train(&mut params, &windows, &options)?;
        io::write_checkpoint(&a.out, &params)?;
        outputs.track(&a.out);
        let mut log = String::new();
        for (i, l) in report.loss_curve.iter().enumerate() {
            log.push_str(&format!("{i} {l}\n"));
        }
        fs::write(&loss_log, log).map_err(|e| CliError::Data(e.to_string()))?;
        outputs.track(&loss_log);
        println!(
            "trained {} windows, {} steps, final epoch loss {:.6}",
            windows.len(),
            report.steps,
            report.loss_curve.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    })
}

fn cmd_infer(a: InferArgs, file_config: &FileConfig) -> Result<(), CliError> {
    let skeleton = Skeleton::default_figure();
    let params = io::read_checkpoint(&a.model)?;
    let initial_motion = load_motion(&a.initial_pose, &skeleton)?;
    let initial_pose = initial_motion
        .frames
        .first()
        .ok_or_else(|| CliError::Data("initial-pose motion is empty".into()))?
        .clone();
    let (raw_frames, fps) = io::read_imu(&a.imu)?;
    let calib = match &a.calib {
        Some(p) => Some(io::read_calibration(p)?),
        None => None,
    };

    let motion_path = a.out_prefix.with_extension("motion");
    let sbp_path = a.out_prefix.with_extension("sbp");
    let terrain_path = a.out_prefix.with_extension("terrain");
    let mut outputs = Outputs::new(&motion_path, "infer", file_config);
    outputs.input("imu", &a.imu)?;
    outputs.input("model", &a.model)?;
    outputs.input("initial_pose", &a.initial_pose)?;
    if let Some(p) = &a.calib {
        outputs.input("calib", p)?;
    }
    with_outputs(outputs, |outputs| {
        let mut config = file_config.pipeline_config()?;
        config.ema_enabled = !a.no_ema;
        let buffer = tip_core::model::HistoryBuffer::new(
            params.config.max_window,
            &initial_pose.flat_q(),
            &[0.0; C_DIM],
        );
        let mut state =
            PoserState::with_window(skeleton.clone(), config, &initial_pose, buffer);
        let mut steps = Vec::with_capacity(raw_frames.len());
        for raw in &raw_frames {
            let frame = match &calib {
                Some(c) => apply_calibration(&raw.orientations, &raw.accelerations, c),
                None => raw.clone(),
            };
            if let Some(out) = state.push(frame, &params).map_err(|e| map_pipeline(e))? {
                steps.push(out);
            }
        }
        steps.extend(state.flush(&params).map_err(map_pipeline)?);

        let mut motion = MotionSequence::new(
            steps.iter().map(|s| s.pose.clone()).collect(),
            skeleton.name,
        );
        motion.frame_rate = fps;
        io::write_motion(&motion_path, &motion)?;
        outputs.track(&motion_path);
        let labels: Vec<SbpFrame> = steps.iter().map(|s| s.sbp.clone()).collect();
        io::write_sbp(&sbp_path, &labels)?;
        outputs.track(&sbp_path);
        io::write_terrain(&terrain_path, &state.terrain)?;
        outputs.track(&terrain_path);
        println!("reconstructed {} frames", steps.len());
        Ok(())
    })
}

fn map_pipeline(e: tip_core::pipeline::PipelineError) -> CliError {
    use tip_core::pipeline::PipelineError as P;
    match e {
        P::Model(m) => m.into(),
        P::NotCalibrated => CliError::Usage(e.to_string()),
        other => CliError::Numeric(other.to_string()),
    }
}

fn cmd_eval(a: EvalArgs, file_config: &FileConfig) -> Result<(), CliError> {
    let skeleton = Skeleton::default_figure();
    let pred = load_motion(&a.pred, &skeleton)?;
    let gt = load_motion(&a.gt, &skeleton)?;
    let mode = match a.mode {
        EvalMode::Strided => WindowMode::Strided,
        EvalMode::Random => WindowMode::SeededRandom { seed: a.seed, count: a.count },
    };
    let report = evaluate(&pred, &gt, &skeleton, mode).map_err(data_err)?;
    let lines = report.lines();
    for l in &lines {
        println!("{l}");
    }
    if let Some(path) = &a.out {
        let mut outputs = Outputs::new(path, "eval", file_config);
        outputs.input("pred", &a.pred)?;
        outputs.input("gt", &a.gt)?;
        with_outputs(outputs, |outputs| {
            fs::write(path, lines.join("\n") + "\n")
                .map_err(|e| CliError::Data(e.to_string()))?;
            outputs.track(path);
            Ok(())
        })?;
    }
    Ok(())
}

fn cmd_export_terrain(a: ExportTerrainArgs, file_config: &FileConfig) -> Result<(), CliError> {
    let skeleton = Skeleton::default_figure();
    let motion = load_motion(&a.motion, &skeleton)?;
    let labels = io::read_sbp(&a.sbp)?;
    if labels.len() != motion.len() {
        return Err(CliError::Data(format!(
            "sbp file has {} frames, motion has {}",
            labels.len(),
            motion.len()
        )));
    }
    let mut outputs = Outputs::new(&a.out, "export-terrain", file_config);
    outputs.input("motion", &a.motion)?;
    outputs.input("sbp", &a.sbp)?;
    with_outputs(outputs, |outputs| {
        let config = file_config.pipeline_config()?.terrain;
        let state = replay_terrain(&skeleton, &motion, &labels, config);
        io::write_terrain(&a.out, &state)?;
        outputs.track(&a.out);
        if let Some(path) = &a.confidence {
            io::write_terrain_confidence(path, &state)?;
            outputs.track(path);
        }
        println!("{} clusters", state.clusters.len());
        Ok(())
    })
}

/// Replays labeled SBPs through the terrain generator the same way the
/// online pipeline feeds it: ages tracked per slot, feet and pelvis only.
pub fn replay_terrain(
    skeleton: &Skeleton,
    motion: &MotionSequence,
    labels: &[SbpFrame],
    config: TerrainConfig,
) -> TerrainState {
    let mut ground = motion.frames[0].root_position;
    ground.z -= skeleton.standing_root_height();
    let mut state = TerrainState::new(config, ground);
    let sources = [
        (0usize, TerrainSource::LeftFoot),
        (1, TerrainSource::RightFoot),
        (4, TerrainSource::Pelvis),
    ];
    let mut age = [0usize; 5];
    let mut active = [false; 5];
    let mut observed = [false; 5];
    for (pose, frame) in motion.frames.iter().zip(labels) {
        let states = forward_kinematics(skeleton, pose);
        let feet = [states[L_ANKLE].position.z, states[R_ANKLE].position.z];
        for (slot, source) in sources {
            let site = skeleton.sbp_sites[slot];
            let entry = &frame.entries[slot];
            let active_now = entry.is_active();
            let world = states[site].position + states[site].orientation * entry.offset;
            if active_now {
                if active[slot] {
                    age[slot] += 1;
                } else {
                    age[slot] = 0;
                    observed[slot] = false;
                }
                if !observed[slot] {
                    let obs = SbpObservation {
                        position: world,
                        source,
                        age: age[slot],
                        deactivated_early: false,
                    };
                    if state.accepts(&obs, &feet) {
                        state.observe(&obs);
                        observed[slot] = true;
                    }
                }
            } else if active[slot] && !observed[slot] {
                let obs = SbpObservation {
                    position: world,
                    source,
                    age: age[slot],
                    deactivated_early: true,
                };
                if state.accepts(&obs, &feet) {
                    state.observe(&obs);
                }
            }
            active[slot] = active_now;
        }
    }
    state
}

fn cmd_calibrate(a: CalibrateArgs, file_config: &FileConfig) -> Result<(), CliError> {
    let (still, _) = io::read_imu(&a.still)?;
    let (tpose, _) = io::read_imu(&a.tpose)?;
    let mut outputs = Outputs::new(&a.out, "calibrate", file_config);
    outputs.input("still", &a.still)?;
    outputs.input("tpose", &a.tpose)?;
    with_outputs(outputs, |outputs| {
        let collect = |frames: &[ImuFrame]| -> [Vec<Matrix3<f64>>; NUM_IMUS] {
            std::array::from_fn(|s| frames.iter().map(|f| f.orientations[s]).collect())
        };
        let raw_still = collect(&still);
        let raw_tpose = collect(&tpose);
        let r_gp_gn = calibrate_global(&raw_still).map_err(data_err)?;
        // T pose bone orientations are the identity in the global frame
        let tpose_bones = [Matrix3::identity(); NUM_IMUS];
        let r_s_b =
            calibrate_sensor_to_bone(&raw_tpose, &r_gp_gn, &tpose_bones).map_err(data_err)?;
        // constant acceleration bias (nominally gravity) in the global frame
        let mut a_bias = [Vector3::zeros(); NUM_IMUS];
        for s in 0..NUM_IMUS {
            let mut sum = Vector3::zeros();
            for f in &still {
                sum += r_gp_gn[s] * f.orientations[s] * f.accelerations[s];
            }
            a_bias[s] = sum / still.len() as f64;
        }
        let cal = CalibrationSet { r_gp_gn, r_s_b, a_bias };
        io::write_calibration(&a.out, &cal)?;
        outputs.track(&a.out);
        Ok(())
    })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file_config = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, &file_config),
        Cmd::LabelSbp(a) => cmd_label(a, &file_config),
        Cmd::Train(a) => cmd_train(a, &file_config),
        Cmd::Infer(a) => cmd_infer(a, &file_config),
        Cmd::Eval(a) => cmd_eval(a, &file_config),
        Cmd::ExportTerrain(a) => cmd_export_terrain(a, &file_config),
        Cmd::Calibrate(a) => cmd_calibrate(a, &file_config),
    }
}
