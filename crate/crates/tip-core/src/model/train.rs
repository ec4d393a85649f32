//! Adam optimization with a cosine-annealed learning rate over
//! teacher-forced windows.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{backward, compute_loss, forward, split_targets, Targets};
use super::{apply_history_dropout, LossBreakdown, ModelError, ModelParams, C_DIM, Q_DIM};

/// One teacher-forced training window: inputs at step t carry the ground
/// truth of t-1; targets are at t.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    /// T x INPUT_DIM rows of [imu_t, q_{t-1}, c_{t-1}].
    pub inputs: Array2<f64>,
    /// T x 108 ground-truth joint rotations.
    pub target_q: Array2<f64>,
    /// T x 3 ground-truth root velocities.
    pub target_v: Array2<f64>,
    /// T x 20 ground-truth SBP rows [b, rx, ry, rz] x 5.
    pub target_c: Array2<f64>,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
    fn targets(&self) -> Targets {
        split_targets(self.target_q.clone(), self.target_v.clone(), &self.target_c)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop early once the epoch-average loss drops below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-4,
            seed: 0,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Epoch-average total loss.
    pub loss_curve: Vec<f64>,
    pub final_breakdown: LossBreakdown,
    pub steps: usize,
}

/// Adam with the usual bias correction.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)); reaches ~0 at the final step.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let frac = step as f64 / total_steps as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Trains in place. Shuffles windows each epoch, applies history dropout
/// per batch, and aborts restoring the last finite-loss parameters if the
/// loss diverges.
pub fn train(
    params: &mut ModelParams,
    windows: &[TrainingWindow],
    options: &TrainOptions,
) -> Result<TrainReport, ModelError> {
    if windows.is_empty() {
        return Err(ModelError::ShapeMismatch("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let n = params.param_count();
    let mut adam = Adam::new(n);
    let batches_per_epoch = windows.len().div_ceil(options.batch_size);
    let total_steps = options.epochs * batches_per_epoch;
    let mut loss_curve = Vec::with_capacity(options.epochs);
    let mut last_good = params.data.clone();
    let mut last_breakdown = LossBreakdown::default();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(options.batch_size) {
            let lr = cosine_lr(options.learning_rate, step, total_steps);
            let mut grads = vec![0.0; n];
            let total_positions: usize = chunk.iter().map(|&i| windows[i].len()).sum();
            let mut batch_loss = LossBreakdown::default();
            for &wi in chunk {
                let w = &windows[wi];
                let mut x = w.inputs.clone();
                apply_history_dropout(&mut x, params.config.history_dropout, &mut rng);
                let (pred, cache) = forward(params, &x.view());
                let targets = w.targets();
                let loss = compute_loss(&pred, &targets)?;
                batch_loss.merge(&loss);
                let weight = w.len() as f64 / total_positions as f64;
                backward(params, &cache, &pred, &targets, weight, &mut grads);
            }
            if !batch_loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                params.data = last_good;
                return Err(ModelError::Divergence(epoch));
            }
            if lr > 0.0 {
                adam.step(&mut params.data, &grads, lr);
            }
            last_good = params.data.clone();
            epoch_loss.merge(&batch_loss);
            last_breakdown = batch_loss;
            step += 1;
        }
        loss_curve.push(epoch_loss.total);
        if let Some(target) = options.target_loss {
            if epoch_loss.total < target {
                break;
            }
        }
    }
    Ok(TrainReport { loss_curve, final_breakdown: last_breakdown, steps: step })
}

/// Slices a labeled sequence into time-shifted teacher-forced windows of at
/// most `window` frames, striding by `stride`.
pub fn make_windows(
    imu: &[crate::imu::ImuFeatures],
    q: &[Vec<f64>],
    v: &[[f64; 3]],
    c: &[Vec<f64>],
    window: usize,
    stride: usize,
) -> Vec<TrainingWindow> {
    let n = imu.len();
    assert!(q.len() == n && v.len() == n && c.len() == n, "sequence length mismatch");
    assert!(stride > 0);
    let mut out = Vec::new();
    // inputs at t need ground truth of t-1, so windows start at frame 1
    let mut start = 1usize;
    while start < n {
        let end = (start + window).min(n);
        let t = end - start;
        let mut inputs = Array2::zeros((t, super::INPUT_DIM));
        let mut tq = Array2::zeros((t, Q_DIM));
        let mut tv = Array2::zeros((t, 3));
        let mut tc = Array2::zeros((t, C_DIM));
        for (row, frame) in (start..end).enumerate() {
            for j in 0..90 {
                inputs[(row, j)] = imu[frame].0[j];
            }
            for j in 0..Q_DIM {
                inputs[(row, 90 + j)] = q[frame - 1][j];
                tq[(row, j)] = q[frame][j];
            }
            for j in 0..C_DIM {
                inputs[(row, 90 + Q_DIM + j)] = c[frame - 1][j];
                tc[(row, j)] = c[frame][j];
            }
            for j in 0..3 {
                tv[(row, j)] = v[frame][j];
            }
        }
        out.push(TrainingWindow { inputs, target_q: tq, target_v: tv, target_c: tc });
        if end == n {
            break;
        }
        start += stride;
    }
    out
}

/// Deterministic random windows for unit tests.
#[cfg(test)]
pub fn synthetic_windows(count: usize, t: usize, rng: &mut impl rand::Rng) -> Vec<TrainingWindow> {
    (0..count)
        .map(|_| TrainingWindow {
            inputs: Array2::from_shape_fn((t, super::INPUT_DIM), |_| rng.gen::<f64>() - 0.5),
            target_q: Array2::from_shape_fn((t, Q_DIM), |_| rng.gen::<f64>() - 0.5),
            target_v: Array2::from_shape_fn((t, 3), |_| rng.gen::<f64>() - 0.5),
            target_c: Array2::from_shape_fn((t, C_DIM), |(_, j)| {
                if j % 4 == 0 {
                    if rng.gen::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    rng.gen::<f64>() * 0.1
                }
            }),
        })
        .collect()
}
