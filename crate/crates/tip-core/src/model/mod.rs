//! Conditional Transformer decoder: teacher-forced parallel training with
//! causal masking and history dropout, and single-step autoregressive
//! inference over a rolling history buffer.

mod net;
mod train;

pub use net::{
    backward, compute_loss, forward, split_targets, LossBreakdown, NetCache, Outputs, Targets,
    BCE_EPS,
};
pub use train::{cosine_lr, make_windows, train, Adam, TrainOptions, TrainReport, TrainingWindow};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

/// IMU feature channels per frame.
pub const IMU_DIM: usize = 90;
/// Joint rotation channels (18 joints x 6D).
pub const Q_DIM: usize = 108;
/// Root linear velocity channels.
pub const V_DIM: usize = 3;
/// SBP channels (5 x [bit, offset]).
pub const C_DIM: usize = 20;
/// Model input width per position: IMU features plus the q and c history of
/// the previous frame. Root velocity is structurally absent from history.
pub const INPUT_DIM: usize = IMU_DIM + Q_DIM + C_DIM;
/// Model output width per position.
pub const OUT_DIM: usize = Q_DIM + V_DIM + C_DIM;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("history buffer is empty")]
    EmptyBuffer,
    #[error("loss became non-finite")]
    NonFinite,
    #[error("training diverged at epoch {0}; parameters restored to the last good checkpoint")]
    Divergence(usize),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Maximum attended history length M; the window holds M+1 frames.
    pub max_window: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Width of the recurrent output summarizer.
    pub summarizer_width: usize,
    /// Probability of zeroing a frame's q,c history channels during training.
    pub history_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // sized to land near the reference total of ~3.68M parameters
        ModelConfig {
            max_window: 39,
            embed_dim: 256,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 1024,
            summarizer_width: 256,
            history_dropout: 0.8,
        }
    }
}

impl ModelConfig {
    /// Small configuration for toy overfit experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            max_window: 39,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 128,
            summarizer_width: 64,
            history_dropout: 0.8,
        }
    }

    /// Minimal configuration (< 5k parameters) for gradient checking.
    pub fn micro() -> Self {
        ModelConfig {
            max_window: 4,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 8,
            summarizer_width: 8,
            history_dropout: 0.8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.history_dropout) {
            return Err(ModelError::ShapeMismatch("history_dropout outside [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Named views into a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    index: HashMap<String, usize>,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let f = config.ff_dim;
        let s = config.summarizer_width;
        let mut specs = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, rows: usize, cols: usize, total: &mut usize| {
            specs.push(TensorSpec { name, rows, cols, offset: *total });
            *total += rows * cols;
        };
        push("embed.w".into(), INPUT_DIM, d, &mut total);
        push("embed.b".into(), 1, d, &mut total);
        push("pos".into(), config.max_window + 1, d, &mut total);
        for l in 0..config.n_layers {
            for (suffix, rows, cols) in [
                ("ln1.g", 1, d),
                ("ln1.b", 1, d),
                ("attn.wq", d, d),
                ("attn.bq", 1, d),
                ("attn.wk", d, d),
                ("attn.bk", 1, d),
                ("attn.wv", d, d),
                ("attn.bv", 1, d),
                ("attn.wo", d, d),
                ("attn.bo", 1, d),
                ("ln2.g", 1, d),
                ("ln2.b", 1, d),
                ("ff.w1", d, f),
                ("ff.b1", 1, f),
                ("ff.w2", f, d),
                ("ff.b2", 1, d),
            ] {
                push(format!("layer{l}.{suffix}"), rows, cols, &mut total);
            }
        }
        push("final_ln.g".into(), 1, d, &mut total);
        push("final_ln.b".into(), 1, d, &mut total);
        for (name, rows, cols) in [
            ("gru.wz", d, s),
            ("gru.uz", s, s),
            ("gru.bz", 1, s),
            ("gru.wr", d, s),
            ("gru.ur", s, s),
            ("gru.br", 1, s),
            ("gru.wh", d, s),
            ("gru.uh", s, s),
            ("gru.bh", 1, s),
            ("head_q.w", s, Q_DIM),
            ("head_q.b", 1, Q_DIM),
            ("head_v.w", s, V_DIM),
            ("head_v.b", 1, V_DIM),
            ("head_cb.w", s, 5),
            ("head_cb.b", 1, 5),
            ("head_cr.w", s, 15),
            ("head_cr.b", 1, 15),
        ] {
            push(name.into(), rows, cols, &mut total);
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, sp)| (sp.name.clone(), i))
            .collect();
        Layout { specs, total, index }
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        &self.specs[*self.index.get(name).unwrap_or_else(|| panic!("no tensor {name}"))]
    }

    pub fn view<'a>(&self, data: &'a [f64], name: &str) -> ArrayView2<'a, f64> {
        let sp = self.spec(name);
        ArrayView2::from_shape((sp.rows, sp.cols), &data[sp.offset..sp.offset + sp.rows * sp.cols])
            .unwrap()
    }

    pub fn row<'a>(&self, data: &'a [f64], name: &str) -> ArrayView1<'a, f64> {
        let sp = self.spec(name);
        debug_assert_eq!(sp.rows, 1);
        ArrayView1::from_shape(sp.cols, &data[sp.offset..sp.offset + sp.cols]).unwrap()
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64], name: &str) -> ArrayViewMut2<'a, f64> {
        let sp = self.spec(name);
        ArrayViewMut2::from_shape(
            (sp.rows, sp.cols),
            &mut data[sp.offset..sp.offset + sp.rows * sp.cols],
        )
        .unwrap()
    }
}

/// Transformer decoder weights over a flat buffer, addressed by the layout.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// Uniform Xavier initialization; layer-norm gains start at one.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        for sp in &layout.specs {
            let slice = &mut data[sp.offset..sp.offset + sp.rows * sp.cols];
            if sp.name.ends_with(".g") {
                slice.fill(1.0);
            } else if sp.name.ends_with(".b") || sp.name.ends_with(".br") || sp.name.ends_with(".bz") || sp.name.ends_with(".bh") {
                // biases stay zero
            } else if sp.name == "pos" {
                for v in slice.iter_mut() {
                    *v = (rng.gen::<f64>() - 0.5) * 0.04;
                }
            } else {
                let bound = (6.0 / (sp.rows + sp.cols) as f64).sqrt();
                for v in slice.iter_mut() {
                    *v = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
                }
            }
        }
        Ok(ModelParams { config, layout, data })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }
}

/// Rolling window of model inputs: each stored row pairs the IMU features
/// of a frame with the q,c feedback of the previous frame. The root
/// velocity is structurally excluded. Seeded with the calibration-time
/// initial pose.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    rows: VecDeque<Vec<f64>>,
    pending_q: Vec<f64>,
    pending_c: Vec<f64>,
}

impl HistoryBuffer {
    pub fn new(max_window: usize, initial_q: &[f64], initial_c: &[f64]) -> Self {
        assert_eq!(initial_q.len(), Q_DIM);
        assert_eq!(initial_c.len(), C_DIM);
        HistoryBuffer {
            capacity: max_window + 1,
            rows: VecDeque::new(),
            pending_q: initial_q.to_vec(),
            pending_c: initial_c.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The attended input window if `imu` arrived now: stored rows plus the
    /// new row, truncated on the left to the window capacity. Does not
    /// mutate the buffer.
    pub fn window_with(&self, imu: &[f64]) -> Result<Array2<f64>, ModelError> {
        if imu.len() != IMU_DIM {
            return Err(ModelError::ShapeMismatch(format!(
                "imu features must be {IMU_DIM}, got {}",
                imu.len()
            )));
        }
        let keep = self.rows.len().min(self.capacity - 1);
        let skip = self.rows.len() - keep;
        let t = keep + 1;
        let mut x = Array2::zeros((t, INPUT_DIM));
        for (i, row) in self.rows.iter().skip(skip).enumerate() {
            x.row_mut(i).assign(&ArrayView1::from(&row[..]));
        }
        let mut last = x.row_mut(keep);
        last.slice_mut(ndarray::s![..IMU_DIM])
            .assign(&ArrayView1::from(imu));
        last.slice_mut(ndarray::s![IMU_DIM..IMU_DIM + Q_DIM])
            .assign(&ArrayView1::from(&self.pending_q[..]));
        last.slice_mut(ndarray::s![IMU_DIM + Q_DIM..])
            .assign(&ArrayView1::from(&self.pending_c[..]));
        Ok(x)
    }

    /// Commits the frame: stores the row built from `imu` and the pending
    /// feedback, then replaces the pending q,c with this frame's feedback
    /// (the pipeline may substitute IK-corrected joint angles here).
    pub fn advance(&mut self, imu: &[f64], q_feedback: &[f64], c_feedback: &[f64]) {
        assert_eq!(imu.len(), IMU_DIM);
        assert_eq!(q_feedback.len(), Q_DIM);
        assert_eq!(c_feedback.len(), C_DIM);
        let mut row = Vec::with_capacity(INPUT_DIM);
        row.extend_from_slice(imu);
        row.extend_from_slice(&self.pending_q);
        row.extend_from_slice(&self.pending_c);
        self.rows.push_back(row);
        while self.rows.len() > self.capacity {
            self.rows.pop_front();
        }
        self.pending_q = q_feedback.to_vec();
        self.pending_c = c_feedback.to_vec();
    }
}

/// Single-step autoregressive inference: runs the decoder over the buffered
/// window plus the new frame and returns the last position's outputs. The
/// buffer itself is not advanced; the pipeline owns write-back.
pub fn predict_step(
    params: &ModelParams,
    buffer: &HistoryBuffer,
    imu: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ModelError> {
    let x = buffer.window_with(imu)?;
    let (out, _) = forward(params, &x.view());
    let t = x.nrows() - 1;
    let q = out.q.row(t).to_vec();
    let v = out.v.row(t).to_vec();
    let mut c = Vec::with_capacity(C_DIM);
    for i in 0..5 {
        c.push(out.c_bits.row(t)[i]);
        c.extend_from_slice(&out.c_offsets.row(t).to_vec()[i * 3..i * 3 + 3]);
    }
    Ok((q, v, c))
}

/// Zeroes the q,c history channels of whole input rows with the configured
/// probability. IMU channels are never dropped.
pub fn apply_history_dropout<R: Rng>(x: &mut Array2<f64>, rate: f64, rng: &mut R) -> usize {
    let mut dropped = 0;
    for mut row in x.rows_mut() {
        if rng.gen::<f64>() < rate {
            for v in row.slice_mut(ndarray::s![IMU_DIM..]).iter_mut() {
                *v = 0.0;
            }
            dropped += 1;
        }
    }
    dropped
}
