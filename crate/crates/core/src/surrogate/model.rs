use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::lstm::{uniform_init, LstmStack, Normalization, StackCache};
use crate::error::{check_dim, Error, Result};
use crate::state::{RngStream, StateVector};

/// A learned one-step transition `window of K states -> next state`.
pub trait Surrogate: Send + Sync {
    fn state_dim(&self) -> usize;
    fn window(&self) -> usize;

    /// `(batch, K, d)` windows to `(batch, d)` predictions.
    fn forward_batch(&self, windows: ArrayView3<f64>) -> Array2<f64>;

    fn forward(&self, window: &[StateVector]) -> Result<StateVector> {
        check_dim(self.window(), window.len())?;
        let d = self.state_dim();
        let mut w = Array3::zeros((1, window.len(), d));
        for (t, s) in window.iter().enumerate() {
            check_dim(d, s.dim())?;
            w.slice_mut(s![0, t, ..]).assign(&s.view());
        }
        let out = self.forward_batch(w.view());
        let v = out.row(0).to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::RolloutDiverged { step: 0 });
        }
        Ok(StateVector::from_vec_unchecked(v))
    }
}

/// A surrogate with trainable parameters and an MSE gradient.
pub trait Trainable: Surrogate + Clone {
    fn zeros_like(&self) -> Self;
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    /// MSE between predictions and `targets`; adds its gradient into `grad`.
    fn loss_and_grad(&self, windows: ArrayView3<f64>, targets: ArrayView2<f64>, grad: &mut Self) -> f64;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params().concat()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.n_params(), flat.len())?;
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to `pred`.
fn mse_grad(pred: &Array2<f64>, targets: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let diff = pred - &targets;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|e| e * e).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Maps raw network outputs to states; the residual form adds the last
/// window state.
fn decode_outputs(raw: &Array2<f64>, windows: ArrayView3<f64>, norm: &Normalization, residual: bool) -> Array2<f64> {
    let k = windows.dim().1;
    let mut out = raw.clone();
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let base = if residual {
                windows[[b, k - 1, i]]
            } else {
                norm.out_shift[i]
            };
            *v = base + norm.out_scale[i] * *v;
        }
    }
    out
}

fn scale_output_grad(d_out: &mut Array2<f64>, norm: &Normalization) {
    for mut row in d_out.rows_mut() {
        for (v, s) in row.iter_mut().zip(&norm.out_scale) {
            *v *= s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmArch {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub window: usize,
    pub residual: bool,
    pub norm: Normalization,
}

/// LSTM stack plus an affine head from the top hidden state to `d` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    pub arch: LstmArch,
    pub stack: LstmStack,
    /// hidden x d
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl LstmModel {
    pub fn new(arch: LstmArch, rng: &mut RngStream) -> Result<Self> {
        validate_common(arch.state_dim, arch.window, &arch.hidden, &arch.norm)?;
        let stack = LstmStack::init(arch.state_dim, &arch.hidden, rng);
        let top = stack.top_hidden();
        let head_w = uniform_init(top, arch.state_dim, 1.0 / (top as f64).sqrt(), rng);
        Ok(LstmModel {
            head_b: Array1::zeros(arch.state_dim),
            head_w,
            stack,
            arch,
        })
    }

    fn forward_raw(&self, windows: ArrayView3<f64>, keep: bool) -> (Array2<f64>, Array2<f64>, Option<StackCache>) {
        let x = self.arch.norm.normalize_inputs(windows);
        let (h, cache) = self.stack.forward(x.view(), keep);
        let raw = h.dot(&self.head_w) + &self.head_b;
        (raw, h, cache)
    }
}

fn validate_common(d: usize, window: usize, hidden: &[usize], norm: &Normalization) -> Result<()> {
    if d == 0 || window == 0 || hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::arg("surrogate needs d, window and hidden sizes > 0"));
    }
    for v in [&norm.in_shift, &norm.in_scale, &norm.out_shift, &norm.out_scale] {
        check_dim(d, v.len())?;
    }
    if norm.in_scale.iter().chain(&norm.out_scale).any(|s| !(*s > 0.0)) {
        return Err(Error::arg("normalization scales must be positive"));
    }
    Ok(())
}

impl Surrogate for LstmModel {
    fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    fn window(&self) -> usize {
        self.arch.window
    }

    fn forward_batch(&self, windows: ArrayView3<f64>) -> Array2<f64> {
        let (raw, _, _) = self.forward_raw(windows, false);
        decode_outputs(&raw, windows, &self.arch.norm, self.arch.residual)
    }
}

impl Trainable for LstmModel {
    fn zeros_like(&self) -> Self {
        LstmModel {
            arch: self.arch.clone(),
            stack: self.stack.zeros_like(),
            head_w: Array2::zeros(self.head_w.raw_dim()),
            head_b: Array1::zeros(self.head_b.raw_dim()),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.stack.params();
        p.push(self.head_w.as_slice().expect("standard layout"));
        p.push(self.head_b.as_slice().expect("standard layout"));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.stack.params_mut();
        p.push(self.head_w.as_slice_mut().expect("standard layout"));
        p.push(self.head_b.as_slice_mut().expect("standard layout"));
        p
    }

    fn loss_and_grad(&self, windows: ArrayView3<f64>, targets: ArrayView2<f64>, grad: &mut Self) -> f64 {
        let (raw, h, cache) = self.forward_raw(windows, true);
        let pred = decode_outputs(&raw, windows, &self.arch.norm, self.arch.residual);
        let (loss, mut d_raw) = mse_grad(&pred, targets);
        scale_output_grad(&mut d_raw, &self.arch.norm);
        grad.head_w += &h.t().dot(&d_raw);
        grad.head_b += &d_raw.sum_axis(Axis(0));
        let d_h = d_raw.dot(&self.head_w.t());
        self.stack
            .backward(cache.as_ref().expect("cache kept"), d_h.view(), &mut grad.stack);
        loss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDeepOnetArch {
    /// Number of sensor / output grid points.
    pub n_grid: usize,
    /// Physical domain length; sensor `i` sits at `i * length / n_grid`.
    pub length: f64,
    pub branch_hidden: Vec<usize>,
    /// Trunk layer widths; the last one is the latent size `p`.
    pub trunk_widths: Vec<usize>,
    pub history: usize,
    pub residual: bool,
    pub norm: Normalization,
}

impl RDeepOnetArch {
    pub fn latent(&self) -> usize {
        *self.trunk_widths.last().expect("non-empty trunk")
    }

    /// Trunk inputs: sensor locations mapped to `[-1, 1)`.
    pub fn trunk_inputs(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_grid, 1), |(i, _)| 2.0 * i as f64 / self.n_grid as f64 - 1.0)
    }
}

/// Dense layer `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn init(input: usize, output: usize, rng: &mut RngStream) -> Self {
        Dense {
            w: uniform_init(input, output, 1.0 / (input as f64).sqrt(), rng),
            b: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients, returns the input gradient.
    fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &x.t().dot(&dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// Recurrent DeepONet: an LSTM branch over the history window produces
/// coefficients `beta` (p), a tanh trunk maps each grid location to `tau(y)`
/// (p), and the output at `y_i` is `sum_k beta_k tau_k(y_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RDeepOnetModel {
    pub arch: RDeepOnetArch,
    pub branch: LstmStack,
    pub branch_head: Dense,
    pub trunk: Vec<Dense>,
}

impl RDeepOnetModel {
    pub fn new(arch: RDeepOnetArch, rng: &mut RngStream) -> Result<Self> {
        validate_common(arch.n_grid, arch.history, &arch.branch_hidden, &arch.norm)?;
        if arch.trunk_widths.is_empty() || arch.trunk_widths.contains(&0) {
            return Err(Error::arg("trunk needs at least one positive width"));
        }
        let branch = LstmStack::init(arch.n_grid, &arch.branch_hidden, rng);
        let branch_head = Dense::init(branch.top_hidden(), arch.latent(), rng);
        let mut trunk = Vec::new();
        let mut prev = 1;
        for &w in &arch.trunk_widths {
            trunk.push(Dense::init(prev, w, rng));
            prev = w;
        }
        Ok(RDeepOnetModel {
            arch,
            branch,
            branch_head,
            trunk,
        })
    }

    /// Trunk outputs for every grid point, `(n_grid, p)`, with the layer
    /// activations (inputs of each layer plus the final output).
    fn trunk_forward(&self) -> Vec<Array2<f64>> {
        let mut acts = vec![self.arch.trunk_inputs()];
        let last = self.trunk.len() - 1;
        for (l, layer) in self.trunk.iter().enumerate() {
            let mut y = layer.apply(acts[l].view());
            if l < last {
                y.mapv_inplace(f64::tanh);
            }
            acts.push(y);
        }
        acts
    }

    pub fn trunk_outputs(&self) -> Array2<f64> {
        self.trunk_forward().pop().expect("trunk output")
    }

    pub fn branch_outputs(&self, windows: ArrayView3<f64>) -> Array2<f64> {
        let x = self.arch.norm.normalize_inputs(windows);
        let (h, _) = self.branch.forward(x.view(), false);
        self.branch_head.apply(h.view())
    }
}

impl Surrogate for RDeepOnetModel {
    fn state_dim(&self) -> usize {
        self.arch.n_grid
    }

    fn window(&self) -> usize {
        self.arch.history
    }

    fn forward_batch(&self, windows: ArrayView3<f64>) -> Array2<f64> {
        let beta = self.branch_outputs(windows);
        let tau = self.trunk_outputs();
        let raw = beta.dot(&tau.t());
        decode_outputs(&raw, windows, &self.arch.norm, self.arch.residual)
    }
}

impl Trainable for RDeepOnetModel {
    fn zeros_like(&self) -> Self {
        RDeepOnetModel {
            arch: self.arch.clone(),
            branch: self.branch.zeros_like(),
            branch_head: self.branch_head.zeros_like(),
            trunk: self.trunk.iter().map(Dense::zeros_like).collect(),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.branch.params();
        for d in std::iter::once(&self.branch_head).chain(&self.trunk) {
            p.push(d.w.as_slice().expect("standard layout"));
            p.push(d.b.as_slice().expect("standard layout"));
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.branch.params_mut();
        for d in std::iter::once(&mut self.branch_head).chain(self.trunk.iter_mut()) {
            p.push(d.w.as_slice_mut().expect("standard layout"));
            p.push(d.b.as_slice_mut().expect("standard layout"));
        }
        p
    }

    fn loss_and_grad(&self, windows: ArrayView3<f64>, targets: ArrayView2<f64>, grad: &mut Self) -> f64 {
        let x = self.arch.norm.normalize_inputs(windows);
        let (h, cache) = self.branch.forward(x.view(), true);
        let beta = self.branch_head.apply(h.view());
        let acts = self.trunk_forward();
        let tau = acts.last().expect("trunk output");
        let raw = beta.dot(&tau.t());
        let pred = decode_outputs(&raw, windows, &self.arch.norm, self.arch.residual);
        let (loss, mut d_raw) = mse_grad(&pred, targets);
        scale_output_grad(&mut d_raw, &self.arch.norm);

        // raw = beta tau^T
        let d_beta = d_raw.dot(tau);
        let mut d_act = d_raw.t().dot(&beta);
        let last = self.trunk.len() - 1;
        for l in (0..self.trunk.len()).rev() {
            if l < last {
                let y = &acts[l + 1];
                d_act.zip_mut_with(y, |g, a| *g *= 1.0 - a * a);
            }
            d_act = self.trunk[l].backward(acts[l].view(), d_act.view(), &mut grad.trunk[l]);
        }
        let d_h = self
            .branch_head
            .backward(h.view(), d_beta.view(), &mut grad.branch_head);
        self.branch
            .backward(cache.as_ref().expect("cache kept"), d_h.view(), &mut grad.branch);
        loss
    }
}

/// Either surrogate architecture, for code that picks one at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum SurrogateModel {
    Lstm(LstmModel),
    RDeepOnet(RDeepOnetModel),
}

impl Surrogate for SurrogateModel {
    fn state_dim(&self) -> usize {
        match self {
            SurrogateModel::Lstm(m) => m.state_dim(),
            SurrogateModel::RDeepOnet(m) => m.state_dim(),
        }
    }

    fn window(&self) -> usize {
        match self {
            SurrogateModel::Lstm(m) => m.window(),
            SurrogateModel::RDeepOnet(m) => m.window(),
        }
    }

    fn forward_batch(&self, windows: ArrayView3<f64>) -> Array2<f64> {
        match self {
            SurrogateModel::Lstm(m) => m.forward_batch(windows),
            SurrogateModel::RDeepOnet(m) => m.forward_batch(windows),
        }
    }
}
