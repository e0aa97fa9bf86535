use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::lstm::Normalization;
use super::model::Trainable;
use crate::error::{check_dim, Error, Result};
use crate::state::{RngStream, StateVector};

/// Supervised `(window of K states, next state)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedPairs {
    /// (n, K, d)
    pub windows: Array3<f64>,
    /// (n, d)
    pub targets: Array2<f64>,
}

impl SupervisedPairs {
    pub fn new(windows: Array3<f64>, targets: Array2<f64>) -> Result<Self> {
        check_dim(windows.dim().0, targets.nrows())?;
        check_dim(windows.dim().2, targets.ncols())?;
        Ok(SupervisedPairs { windows, targets })
    }

    /// Every length-`window` slice of every trajectory, paired with the state
    /// that follows it.
    pub fn from_trajectories(trajectories: &[Vec<StateVector>], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::arg("window must be >= 1"));
        }
        let d = trajectories
            .first()
            .and_then(|t| t.first())
            .map(|s| s.dim())
            .ok_or_else(|| Error::arg("no trajectories"))?;
        let n: usize = trajectories.iter().map(|t| t.len().saturating_sub(window)).sum();
        if n == 0 {
            return Err(Error::arg(format!("trajectories shorter than window + 1 = {}", window + 1)));
        }
        let mut windows = Array3::zeros((n, window, d));
        let mut targets = Array2::zeros((n, d));
        let mut row = 0;
        for traj in trajectories {
            for s in traj {
                check_dim(d, s.dim())?;
            }
            for start in 0..traj.len().saturating_sub(window) {
                for t in 0..window {
                    windows
                        .slice_mut(s![row, t, ..])
                        .assign(&traj[start + t].view());
                }
                targets.row_mut(row).assign(&traj[start + window].view());
                row += 1;
            }
        }
        Ok(SupervisedPairs { windows, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn window(&self) -> usize {
        self.windows.dim().1
    }

    fn gather(&self, idx: &[usize]) -> (Array3<f64>, Array2<f64>) {
        (
            self.windows.select(Axis(0), idx),
            self.targets.select(Axis(0), idx),
        )
    }
}

/// Per-component input and output scaling from the training pairs. With
/// `residual`, outputs are scaled by the spread of the one-step increment.
pub fn fit_normalization(pairs: &SupervisedPairs, residual: bool) -> Normalization {
    let d = pairs.state_dim();
    let flat = pairs
        .windows
        .to_shape((pairs.len() * pairs.window(), d))
        .expect("contiguous windows")
        .to_owned();
    let (in_shift, in_scale) = column_stats(&flat);
    let (out_shift, out_scale) = if residual {
        let last = pairs.windows.index_axis(Axis(1), pairs.window() - 1);
        let inc = &pairs.targets - &last;
        (vec![0.0; d], column_stats(&inc).1)
    } else {
        column_stats(&pairs.targets)
    };
    Normalization {
        in_shift,
        in_scale,
        out_shift,
        out_scale,
    }
}

fn column_stats(a: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = a.mean_axis(Axis(0)).expect("non-empty");
    let std = a.std_axis(Axis(0), 0.0);
    let scale = std.iter().map(|s| if *s > 1e-12 { *s } else { 1.0 }).collect();
    (mean.to_vec(), scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update of `params` (given as slices in the same
    /// order as `grads`).
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut off = 0;
        for (p, g) in params.into_iter().zip(grads) {
            let m = &mut self.m[off..off + p.len()];
            let v = &mut self.v[off..off + p.len()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            off += p.len();
        }
    }
}

fn clip_gradients<M: Trainable>(grad: &mut M, max_norm: f64) {
    let norm = grad
        .params()
        .iter()
        .flat_map(|p| p.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in grad.params_mut() {
            p.iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Mini-batch Adam on MSE. Returns the per-epoch training loss, the
/// size-weighted mean of batch losses seen during that epoch.
pub fn train<M: Trainable>(
    model: &mut M,
    data: &SupervisedPairs,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(model.n_params(), cfg.lr);
    train_with_state(model, data, cfg, rng, &mut adam)
}

/// Like [`train`] but continues from existing optimizer moments.
pub fn train_with_state<M: Trainable>(
    model: &mut M,
    data: &SupervisedPairs,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    adam: &mut AdamState,
) -> Result<Vec<f64>> {
    check_dim(model.window(), data.window())?;
    check_dim(model.state_dim(), data.state_dim())?;
    check_dim(model.n_params(), adam.m.len())?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::arg("training needs data and batch_size >= 1"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::arg("learning rate must be >= 0"));
    }
    adam.lr = cfg.lr;
    let mut order: Vec<usize> = Vec::with_capacity(data.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut grad = model.zeros_like();
    for epoch in 0..cfg.epochs {
        // each epoch permutes 0..n afresh, so splitting a run into
        // single-epoch calls sharing `rng` and `adam` changes nothing
        order.clear();
        order.extend(0..data.len());
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (w, t) = data.gather(idx);
            for p in grad.params_mut() {
                p.fill(0.0);
            }
            let loss = model.loss_and_grad(w.view(), t.view(), &mut grad);
            let grad_ok = grad.params().iter().all(|p| p.iter().all(|g| g.is_finite()));
            if !loss.is_finite() || !grad_ok {
                return Err(Error::TrainingDiverged { epoch, batch });
            }
            if let Some(c) = cfg.clip_norm {
                clip_gradients(&mut grad, c);
            }
            if cfg.lr > 0.0 {
                adam.update(model.params_mut(), grad.params());
            }
            total += loss * idx.len() as f64;
        }
        trace.push(total / data.len() as f64);
    }
    Ok(trace)
}

/// Trains on each group in turn for the full epoch budget, keeping one
/// optimizer state throughout. Returns the concatenated loss trace.
pub fn train_sequential<M: Trainable>(
    model: &mut M,
    groups: &[SupervisedPairs],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(model.n_params(), cfg.lr);
    let mut trace = Vec::new();
    for g in groups {
        trace.extend(train_with_state(model, g, cfg, rng, &mut adam)?);
    }
    Ok(trace)
}

/// Full-dataset MSE, evaluated in chunks.
pub fn evaluate_mse<M: Trainable>(model: &M, data: &SupervisedPairs) -> f64 {
    let mut total = 0.0;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + 1024).min(n);
        let pred = model.forward_batch(data.windows.slice(s![start..end, .., ..]));
        let diff = pred - data.targets.slice(s![start..end, ..]);
        total += diff.iter().map(|e| e * e).sum::<f64>();
        start = end;
    }
    total / (n * data.state_dim()) as f64
}
